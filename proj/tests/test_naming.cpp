#include "doctest.h"

#include <cmath>
#include <limits>
#include <random>

#include "carn/gradcheck.hpp"
#include "carn/naming.hpp"

using namespace carn;

namespace {

CastList three_cast() {
  CastList c;
  c.names = {"Ted", "Lily", "Robin"};
  c.counts = {3, 2, 1};
  c.unk_index = 3;
  return c;
}

Clip frame_clip(const std::string& speaker, int faces) {
  Clip clip;
  Frame f;
  f.frame_id = 0;
  f.time = 0.5;
  for (int i = 0; i < faces; ++i) {
    FaceDetection d;
    d.face_id = i;
    d.box = {0, 0, 1, 1};
    d.embedding = Eigen::VectorXd::Unit(2, 0);
    f.faces.push_back(d);
  }
  clip.frames.push_back(f);
  clip.subtitles.push_back({speaker, {"hi"}, 0, 1});
  return clip;
}

// Per frame, per face, per class loops with no shared helpers.
double oracle_rkl(const Eigen::MatrixXd& p, const std::vector<int>& frame_of_row,
                  const std::map<int, Eigen::VectorXd>& target_of_frame) {
  double total = 0;
  for (const auto& [frame, g] : target_of_frame) {
    double best = std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < p.rows(); ++j) {
      if (frame_of_row[static_cast<std::size_t>(j)] != frame) continue;
      double kl = 0;
      for (Eigen::Index c = 0; c < p.cols(); ++c) {
        if (p(j, c) > 0) kl += p(j, c) * std::log(p(j, c) / g(c));
      }
      if (kl < best) best = kl;
    }
    total += best;
  }
  return total;
}

Eigen::MatrixXd random_rows(std::mt19937_64& rng, int n, int classes) {
  std::gamma_distribution<double> gamma(0.7, 1.0);
  Eigen::MatrixXd p(n, classes);
  for (int i = 0; i < n; ++i) {
    for (int c = 0; c < classes; ++c) p(i, c) = gamma(rng);
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

}  // namespace

TEST_CASE("zero parameters give uniform rows") {
  auto params = NamingParams<double>::zeros(4, 5, 4);
  Eigen::MatrixXd e = Eigen::MatrixXd::Random(3, 4);
  auto rows = name_distributions<double>(e, params);
  CHECK((rows.array() - 0.25).abs().maxCoeff() < 1e-15);
}

TEST_CASE("hand-set naming head matches scalar evaluation") {
  NamingParams<double> p;
  p.w1 = (Eigen::MatrixXd(2, 2) << 0.5, -1.0, 2.0, 0.25).finished();
  p.b1 = (Eigen::MatrixXd(1, 2) << 0.1, 0.3).finished();
  p.w2 = (Eigen::MatrixXd(2, 2) << 1.0, -0.5, 0.75, 2.0).finished();
  p.b2 = (Eigen::MatrixXd(1, 2) << 0.0, -0.2).finished();
  Eigen::MatrixXd f(1, 2);
  f << 1, 0;
  // Row form: h = relu(f W1 + b1) = relu(0.5 + 0.1, -1.0 + 0.3) = (0.6, 0)
  // z = h W2 + b2 = (0.6, -0.3 - 0.2) = (0.6, -0.5)
  const double z0 = 0.6, z1 = -0.5;
  const double p0 = std::exp(z0) / (std::exp(z0) + std::exp(z1));
  auto rows = name_distributions<double>(f, p);
  CHECK(rows(0, 0) == doctest::Approx(p0).epsilon(1e-14));
  CHECK(rows(0, 1) == doctest::Approx(1 - p0).epsilon(1e-14));
}

TEST_CASE("rows are distributions and dimension mismatches throw") {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n(0, 2);
  NamingParams<double> p = NamingParams<double>::zeros(6, 5, 7);
  for (auto* m : {&p.w1, &p.b1, &p.w2, &p.b2}) *m = m->unaryExpr([&](double) { return n(rng); });
  Eigen::MatrixXd e = Eigen::MatrixXd::Random(20, 6);
  auto rows = name_distributions<double>(e, p);
  CHECK((rows.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-12);
  CHECK(rows.minCoeff() >= 0);
  CHECK_THROWS_AS(name_distributions<double>(Eigen::MatrixXd::Random(2, 5), p), ShapeError);
}

TEST_CASE("broadcast targets") {
  const CastList cast = three_cast();
  auto seq = broadcast_targets(frame_clip("Ted", 3), cast, 0.05);
  REQUIRE(seq.entries.size() == 3);
  Eigen::VectorXd expect = Eigen::VectorXd::Constant(4, 0.05 / 4);
  expect(0) += 0.95;
  for (const auto& e : seq.entries) {
    CHECK((e.target - expect).norm() < 1e-15);
    CHECK(e.target.sum() == doctest::Approx(1.0));
  }
  CHECK(broadcast_targets(frame_clip("Stranger", 3), cast, 0.05).entries.empty());
  CHECK(broadcast_targets(frame_clip("Lily", 0), cast, 0.05).entries.empty());
  auto hard = broadcast_targets(frame_clip("Lily", 1), cast, 0.0);
  CHECK(hard.entries[0].target == Eigen::Vector4d(0, 1, 0, 0));
}

TEST_CASE("speaker alignment prefers the latest line") {
  Clip clip = frame_clip("Ted", 1);
  clip.subtitles.push_back({"Lily", {"yo"}, 0.25, 2});
  CHECK(speaker_at(clip, 0.5)->speaker == "Lily");
  CHECK(speaker_at(clip, 0.1)->speaker == "Ted");
  CHECK(speaker_at(clip, 3.0) == nullptr);
}

TEST_CASE("rkl is zero when a face matches its target") {
  TargetSeq seq;
  Eigen::VectorXd g(3);
  g << 0.9, 0.05, 0.05;
  seq.entries = {{0, 0, g}, {1, 0, g}, {2, 1, g}};
  NameDistributionSeq<double> preds;
  preds.face_ids = {0, 1, 2};
  preds.rows = Eigen::MatrixXd(3, 3);
  preds.rows << 0.2, 0.4, 0.4, 0.9, 0.05, 0.05, 0.9, 0.05, 0.05;
  CHECK(rkl_loss(preds, seq) == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(rkl_loss(preds, TargetSeq{}) == 0.0);
}

TEST_CASE("rkl single face, uniform prediction, analytic value") {
  TargetSeq seq;
  Eigen::VectorXd g = Eigen::VectorXd::Constant(3, 0.05 / 3);
  g(0) += 0.95;
  seq.entries = {{5, 0, g}};
  NameDistributionSeq<double> preds{Eigen::MatrixXd::Constant(1, 3, 1.0 / 3), {5}};
  double expect = 0;
  for (int c = 0; c < 3; ++c) expect += (1.0 / 3) * std::log((1.0 / 3) / g(c));
  CHECK(rkl_loss(preds, seq) == doctest::Approx(expect).epsilon(1e-14));
}

TEST_CASE("rkl matches the loop oracle on random instances") {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 1 + static_cast<int>(rng() % 20);
    const int classes = 2 + static_cast<int>(rng() % 6);
    const double eps = std::array<double, 3>{0.01, 0.05, 0.2}[rng() % 3];
    NameDistributionSeq<double> preds{random_rows(rng, n, classes), {}};
    std::vector<int> frame_of(static_cast<std::size_t>(n));
    std::map<int, Eigen::VectorXd> target_of;
    TargetSeq seq;
    for (int i = 0; i < n; ++i) {
      preds.face_ids.push_back(100 + i);
      frame_of[static_cast<std::size_t>(i)] = static_cast<int>(rng() % 5);
    }
    for (int i = 0; i < n; ++i) {
      const int fr = frame_of[static_cast<std::size_t>(i)];
      if (!target_of.count(fr)) {
        Eigen::VectorXd g = Eigen::VectorXd::Constant(classes, eps / classes);
        g(static_cast<Eigen::Index>(rng() % (classes - 1))) += 1 - eps;
        target_of[fr] = g;
      }
      seq.entries.push_back({100 + i, fr, target_of[fr]});
    }
    const double got = rkl_loss(preds, seq);
    CHECK(got >= 0);
    CHECK(std::abs(got - oracle_rkl(preds.rows, frame_of, target_of)) <= 1e-9);
  }
}

TEST_CASE("lowering the winning KL never raises the loss") {
  Eigen::VectorXd g(3);
  g << 0.9, 0.05, 0.05;
  TargetSeq seq;
  seq.entries = {{0, 0, g}, {1, 0, g}};
  NameDistributionSeq<double> preds;
  preds.face_ids = {0, 1};
  preds.rows = Eigen::MatrixXd(2, 3);
  preds.rows << 0.5, 0.3, 0.2, 0.2, 0.4, 0.4;
  double prev = rkl_loss(preds, seq);
  for (int step = 0; step < 10; ++step) {
    preds.rows.row(0) = 0.8 * preds.rows.row(0) + 0.2 * g.transpose();
    const double now = rkl_loss(preds, seq);
    CHECK(now <= prev + 1e-15);
    prev = now;
  }
}

TEST_CASE("hard one-hot target with off-support mass is not finite") {
  TargetSeq seq;
  seq.entries = {{0, 0, Eigen::Vector3d(1, 0, 0)}};
  NameDistributionSeq<double> preds{Eigen::MatrixXd::Constant(1, 3, 1.0 / 3), {0}};
  CHECK_THROWS_AS(rkl_loss(preds, seq), NonFiniteLossError);
  NameDistributionSeq<double> exact{(Eigen::MatrixXd(1, 3) << 1, 0, 0).finished(), {0}};
  CHECK(rkl_loss(exact, seq) == 0.0);
}

TEST_CASE("assign_names") {
  const CastList cast = three_cast();
  NameDistributionSeq<double> preds;
  preds.face_ids = {4, 5, 6};
  preds.rows = Eigen::MatrixXd(3, 4);
  preds.rows << 0.1, 0.7, 0.2, 0.0, 0.25, 0.25, 0.25, 0.25, 0.1, 0.1, 0.1, 0.7;
  auto names = assign_names(preds, cast);
  CHECK(names.at(4) == "Lily");
  CHECK(names.at(5) == "Ted");
  CHECK(names.count(6) == 0);
  CHECK(argmax_rows<double>(preds.rows) == std::vector<int>{1, 0, 3});
}

TEST_CASE("naming head gradients agree with finite differences") {
  GradCheckOptions opt;
  opt.components = {GradComponent::Naming};
  opt.configurations = 12;
  auto report = grad_check(opt);
  CHECK(report.groups.size() == 4);
  CHECK(report.passed());
  CHECK(report.max_error(GradComponent::Naming) <= 1e-4);
}
