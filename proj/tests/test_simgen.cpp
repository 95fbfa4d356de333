#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <filesystem>

#include "dualest/simgen.hpp"
#include "support/factories.hpp"

using namespace dualest;

TEST_CASE("sparsify zeroes the smallest-magnitude entries") {
  Matrix w(3, 3);
  w << 0.1, -0.5, 0.2, 0.9, -0.3, 0.7, -0.05, 0.4, 0.6;
  const auto [out, mask] = sparsify(w, 0.4);  // floor(0.4 * 9) = 3 zeroed

  Matrix want = w;
  want(0, 0) = 0.0;   // |0.1|
  want(0, 2) = 0.0;   // |0.2|
  want(2, 0) = 0.0;   // |0.05|
  REQUIRE((out - want).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE_FALSE(mask(0, 0));
  REQUIRE_FALSE(mask(0, 2));
  REQUIRE_FALSE(mask(2, 0));
  REQUIRE(int(mask.count()) == 6);
}

TEST_CASE("sparsify with fraction zero is the identity") {
  RandomStream rng(60);
  const Matrix w = rng.normal_matrix(4, 4);
  const auto [out, mask] = sparsify(w, 0.0);
  REQUIRE((out - w).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE(mask.all());
}

TEST_CASE("sparsify survivor count matches a sorting oracle") {
  RandomStream rng(61);
  const Matrix w = rng.normal_matrix(10, 10);
  const auto [out, mask] = sparsify(w, 0.4);
  REQUIRE(int(mask.count()) == 60);

  // Oracle: the survivors are exactly the 60 largest by |value|.
  std::vector<double> mags;
  for (Eigen::Index i = 0; i < 10; ++i)
    for (Eigen::Index j = 0; j < 10; ++j) mags.push_back(std::abs(w(i, j)));
  std::sort(mags.begin(), mags.end());
  const double threshold = mags[39];  // largest zeroed magnitude
  for (Eigen::Index i = 0; i < 10; ++i)
    for (Eigen::Index j = 0; j < 10; ++j) {
      if (mask(i, j))
        REQUIRE(std::abs(w(i, j)) >= threshold);
      else
        REQUIRE(std::abs(w(i, j)) <= threshold);
    }
}

TEST_CASE("sparsify is idempotent") {
  RandomStream rng(62);
  const Matrix w = rng.normal_matrix(7, 7);
  const auto [once, mask1] = sparsify(w, 0.3);
  const auto [twice, mask2] = sparsify(once, 0.3);
  REQUIRE((once - twice).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE((mask1 == mask2).all());
}

TEST_CASE("random_measurement_matrix construction") {
  SECTION("p singular values, all strictly positive") {
    RandomStream rng(63);
    const Matrix h = random_measurement_matrix(4, 10, rng);
    Eigen::JacobiSVD<Matrix> svd(h);
    REQUIRE(svd.singularValues().size() == 4);
    REQUIRE(svd.singularValues().minCoeff() > 0.0);
  }

  SECTION("mean singular value matches the folded-normal location") {
    RandomStream rng(64);
    double sum = 0;
    long count = 0;
    for (int draw = 0; draw < 1000; ++draw) {
      const Matrix h = random_measurement_matrix(3, 6, rng);
      Eigen::JacobiSVD<Matrix> svd(h);
      sum += svd.singularValues().sum();
      count += 3;
    }
    REQUIRE(std::abs(sum / double(count) - 2.0) < 0.05);
  }

  SECTION("1x1 case reproduces the first draw up to sign") {
    RandomStream rng(65);
    const Matrix h = random_measurement_matrix(1, 1, rng);
    RandomStream replay(65);
    const double sv = std::abs(replay.normal(2.0, 0.5));  // singular values drawn first
    REQUIRE(std::abs(std::abs(h(0, 0)) - sv) < 1e-15);
  }

  SECTION("p > n is rejected") {
    RandomStream rng(66);
    REQUIRE_THROWS_AS(random_measurement_matrix(5, 3, rng), invalid_input);
  }
}

TEST_CASE("ei_measurement_matrix zeroes the inhibitory block") {
  RandomStream rng(67);
  const Matrix h = ei_measurement_matrix(3, 5, rng);
  REQUIRE(h.rows() == 3);
  REQUIRE(h.cols() == 10);
  REQUIRE(h.rightCols(5).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE(h.leftCols(5).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("simulate: noiseless identity dynamics stay at x0") {
  const Eigen::Index n = 3;
  NetworkModel m = NetworkModel::canonical(Matrix::Identity(n, n), Matrix::Zero(n, n),
                                           Vector::Zero(n), Vector::Ones(n));
  RandomStream hrng(68);
  const Matrix h = random_measurement_matrix(2, n, hrng);
  const ObservationSetup obs =
      ObservationSetup::create(h, Matrix::Zero(n, n), Matrix::Zero(2, 2), false);
  Vector x0(n);
  x0 << 0.4, -0.2, 1.0;
  RandomStream rng(69);
  const GroundTruth gt = simulate(m, obs, 20, x0, rng);
  for (Eigen::Index t = 0; t < 20; ++t) {
    REQUIRE((gt.states.row(t).transpose() - x0).cwiseAbs().maxCoeff() == 0.0);
    REQUIRE((gt.measurements.row(t).transpose() - h * x0).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("simulate: identical seeds give bit-identical trajectories") {
  RandomStream mrng(70);
  NetworkModel m = factories::random_hopfield(4, mrng);
  const ObservationSetup obs = factories::random_obs(m, 2, mrng, 0.04, 0.01);
  const Vector x0 = Vector::Zero(4);
  RandomStream r1(71), r2(71);
  const GroundTruth a = simulate(m, obs, 50, x0, r1);
  const GroundTruth b = simulate(m, obs, 50, x0, r2);
  REQUIRE((a.states - b.states).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE((a.measurements - b.measurements).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("simulate: pure-noise states have the configured covariance") {
  const Eigen::Index n = 3;
  const double sigma = 0.7;
  NetworkModel m = NetworkModel::canonical(Matrix::Zero(n, n), Matrix::Zero(n, n),
                                           Vector::Zero(n), Vector::Ones(n));
  const ObservationSetup obs = ObservationSetup::create(
      Matrix::Identity(n, n), sigma * sigma * Matrix::Identity(n, n),
      0.01 * Matrix::Identity(n, n));
  RandomStream rng(72);
  const GroundTruth gt = simulate(m, obs, 100000, Vector::Zero(n), rng);
  const Matrix centered = gt.states.rowwise() - gt.states.colwise().mean();
  const Matrix cov = centered.transpose() * centered / double(gt.states.rows() - 1);
  for (Eigen::Index i = 0; i < n; ++i) {
    REQUIRE(std::abs(cov(i, i) - sigma * sigma) < 0.05 * sigma * sigma);
    for (Eigen::Index j = 0; j < n; ++j)
      if (i != j) REQUIRE(std::abs(cov(i, j)) < 0.05 * sigma * sigma);
  }
}

TEST_CASE("simulate reports divergence with the step index") {
  const Eigen::Index n = 2;
  NetworkModel wild = NetworkModel::canonical(1e200 * Matrix::Identity(n, n),
                                              Matrix::Zero(n, n), Vector::Zero(n),
                                              Vector::Ones(n), Nonlinearity::Identity);
  const ObservationSetup obs = ObservationSetup::create(
      Matrix::Identity(n, n), Matrix::Identity(n, n), 0.01 * Matrix::Identity(n, n));
  RandomStream rng(73);
  REQUIRE_THROWS_AS(simulate(wild, obs, 10, Vector::Ones(n), rng), divergence_error);
}

TEST_CASE("generate_ground_truth follows the benchmark protocol") {
  SimulationSpec spec;
  spec.n_nodes = 10;
  spec.horizon = 400;
  spec.seed = 74;

  const GroundTruth gt = generate_ground_truth(spec);
  REQUIRE(gt.model.size() == 10);
  REQUIRE(gt.obs.channels() == 4);  // 40% of 10
  REQUIRE(gt.states.rows() == 400);

  SECTION("sparsity pattern equals the free mask") {
    REQUIRE(int(gt.model.free_mask.count()) == 60);
    for (Eigen::Index i = 0; i < 10; ++i)
      for (Eigen::Index j = 0; j < 10; ++j)
        if (!gt.model.free_mask(i, j)) REQUIRE(gt.model.b_matrix(i, j) == 0.0);
  }

  SECTION("reproducible from the seed") {
    const GroundTruth again = generate_ground_truth(spec);
    REQUIRE((gt.states - again.states).cwiseAbs().maxCoeff() == 0.0);
    REQUIRE((gt.measurements - again.measurements).cwiseAbs().maxCoeff() == 0.0);
    REQUIRE((gt.model.b_matrix - again.model.b_matrix).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("dynamic-range screen flags pinned coordinates") {
  const Eigen::Index n = 5;
  // Large constant drive pins every coordinate deep in saturation.
  NetworkModel m = NetworkModel::hopfield(0.1 * Matrix::Identity(n, n), Vector::Zero(n),
                                          10.0 * Vector::Ones(n));
  const ObservationSetup obs = ObservationSetup::create(
      Matrix::Identity(n, n), 0.01 * Matrix::Identity(n, n), 0.01 * Matrix::Identity(n, n));
  RandomStream rng(75);
  const GroundTruth gt = simulate(m, obs, 200, Vector::Zero(n), rng);
  REQUIRE_FALSE(gt.dynamic_range_ok);
  REQUIRE(gt.saturated_coords.size() == size_t(n));

  // A well-behaved instance passes the screen.
  SimulationSpec spec;
  spec.n_nodes = 10;
  spec.horizon = 300;
  spec.seed = 76;
  spec.weights.d_max = 0.5;
  spec.weights.c_std = 0.3;
  const GroundTruth ok = generate_ground_truth(spec);
  REQUIRE(ok.dynamic_range_ok);
}

TEST_CASE("ground truth round-trips through the file formats bit-exactly") {
  SimulationSpec spec;
  spec.n_nodes = 6;
  spec.horizon = 50;
  spec.seed = 77;
  const GroundTruth gt = generate_ground_truth(spec);
  const std::string dir = std::filesystem::temp_directory_path() / "dualest_gt_test";
  save_ground_truth(dir, gt, {"test_header"});
  const GroundTruth back = load_ground_truth(dir);
  REQUIRE((gt.states - back.states).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE((gt.measurements - back.measurements).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE((gt.obs.h - back.obs.h).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE((gt.model.b_matrix - back.model.b_matrix).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE((gt.model.free_mask == back.model.free_mask).all());
  REQUIRE((gt.x0 - back.x0).cwiseAbs().maxCoeff() == 0.0);
  std::filesystem::remove_all(dir);
}
