#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "dualest/io.hpp"
#include "support/factories.hpp"

using namespace dualest;

TEST_CASE("format_double round-trips exactly") {
  RandomStream rng(140);
  std::vector<double> values = {0.0, 1.0, -1.0, 0.1, 1e-300, -1e300, 2.0 / 3.0, M_PI};
  for (int i = 0; i < 200; ++i) values.push_back(rng.normal(0.0, std::pow(10.0, rng.uniform(-10, 10))));
  for (const double v : values) {
    REQUIRE(std::strtod(format_double(v).c_str(), nullptr) == v);
  }
}

TEST_CASE("matrix CSV round-trips bit-exactly and skips comments") {
  RandomStream rng(141);
  const Matrix m = rng.normal_matrix(7, 3, 123.456);
  const std::string path = std::filesystem::temp_directory_path() / "dualest_io_test.csv";
  write_matrix_csv(path, m, "col", {"config_hash=abc", "seed=42"});
  const Matrix back = read_matrix_csv(path);
  REQUIRE(back.rows() == 7);
  REQUIRE(back.cols() == 3);
  REQUIRE((m - back).cwiseAbs().maxCoeff() == 0.0);
  std::filesystem::remove(path);
}

TEST_CASE("network model JSON round-trips bit-exactly") {
  RandomStream rng(142);
  NetworkModel m = factories::random_hopfield(5, rng);
  auto [w, mask] = sparsify(m.b_matrix, 0.4);
  m.b_matrix = w;
  m.free_mask = mask;
  const std::string path = std::filesystem::temp_directory_path() / "dualest_model_test.json";
  save_model(path, m);
  const NetworkModel back = load_model(path);
  REQUIRE((m.a_matrix - back.a_matrix).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE((m.b_matrix - back.b_matrix).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE((m.offset - back.offset).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE((m.gain - back.gain).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE((m.free_mask == back.free_mask).all());
  REQUIRE(back.offset_mode == OffsetMode::Additive);
  REQUIRE(back.nonlinearity == Nonlinearity::Tanh);
  std::filesystem::remove(path);
}

TEST_CASE("EI model JSON round-trips bit-exactly") {
  RandomStream rng(143);
  const EiBrainModel m = factories::random_ei(3, rng);
  const std::string path = std::filesystem::temp_directory_path() / "dualest_ei_test.json";
  save_json(path, model_to_json(m));
  const EiBrainModel back = ei_model_from_json(load_json(path));
  REQUIRE((m.w_p - back.w_p).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE((m.w_r - back.w_r).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE((m.tau_p - back.tau_p).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE((m.offset - back.offset).cwiseAbs().maxCoeff() == 0.0);
  std::filesystem::remove(path);
}

TEST_CASE("malformed model files are rejected") {
  nlohmann::json j;
  j["family"] = "network";
  j["n"] = 2;
  j["a_matrix"] = {1.0, 0.0, 0.0};  // wrong count
  REQUIRE_THROWS_AS(model_from_json(j), invalid_input);
}

TEST_CASE("config hash is stable and content-sensitive") {
  nlohmann::json a = {{"x", 1}, {"y", "z"}};
  nlohmann::json b = {{"x", 2}, {"y", "z"}};
  REQUIRE(config_hash(a) == config_hash(a));
  REQUIRE(config_hash(a) != config_hash(b));
  REQUIRE(hex64(config_hash(a)).size() == 16);
}
