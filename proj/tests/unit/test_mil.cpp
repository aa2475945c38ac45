#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "bagforge/errors.hpp"
#include "bagforge/mil.hpp"
#include "bagforge/rng.hpp"
#include "support/tmpdir.hpp"

using namespace bagforge;

namespace {

const Arch kAllArchs[] = {Arch::mean,  Arch::max,    Arch::abmil,   Arch::gated_abmil,
                          Arch::varmil, Arch::clam_sb, Arch::clam_mb, Arch::simple_transmil};

MilConfig small_config(Arch arch, Task task = Task::classification, int d = 6) {
  MilConfig c;
  c.arch = arch;
  c.input_dim = d;
  c.embed_dim = 8;
  c.attn_dim = 4;
  c.head_hidden_dims = {5};
  c.task = task;
  c.init_seed = 7;
  c.instance_k = 2;
  return c;
}

EmbeddingBag random_bag(Rng& rng, Eigen::Index k, Eigen::Index d) {
  EmbeddingBag b;
  b.slide_id = "S";
  b.patient_id = "P";
  b.features.resize(k, d);
  for (Eigen::Index i = 0; i < b.features.size(); ++i) b.features.data()[i] = static_cast<float>(rng.normal());
  b.encoder = {"enc", d};
  return b;
}

double rel_diff(double a, double b) { return std::abs(a - b) / std::max(1.0, std::abs(b)); }

}  // namespace

TEST_CASE("initialization is deterministic in the seed") {
  for (Arch a : kAllArchs) {
    const MilModel m1 = MilModel::init(small_config(a));
    const MilModel m2 = MilModel::init(small_config(a));
    CHECK(m1.params().identical(m2.params()));
  }
  MilConfig other = small_config(Arch::abmil);
  other.init_seed = 8;
  CHECK_FALSE(MilModel::init(other).params().identical(MilModel::init(small_config(Arch::abmil)).params()));
}

TEST_CASE("abmil parameter shapes") {
  MilConfig c;
  c.arch = Arch::abmil;
  c.input_dim = 32;
  c.embed_dim = 16;
  c.attn_dim = 8;
  c.head_hidden_dims = {4};
  const MilModel m = MilModel::init(c);
  const auto& p = m.params();
  CHECK(p["proj.weight"].rows() == 32);
  CHECK(p["proj.weight"].cols() == 16);
  CHECK(p["attn.V"].rows() == 16);
  CHECK(p["attn.V"].cols() == 8);
  CHECK(p["attn.w"].rows() == 8);
  CHECK(p["attn.w"].cols() == 1);
  CHECK(p["head.0.weight"].rows() == 16);
  CHECK(p["head.0.weight"].cols() == 4);
  CHECK(p["head.1.weight"].rows() == 4);
  CHECK(p["head.1.weight"].cols() == 1);
  CHECK(p["proj.bias"].isZero());
  const double bound = 1.0 / std::sqrt(32.0);
  CHECK(p["proj.weight"].cwiseAbs().maxCoeff() <= bound);
}

TEST_CASE("config validation") {
  MilConfig c = small_config(Arch::abmil);
  c.dropout = 1.0;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  MilConfig mb = small_config(Arch::clam_mb);
  mb.n_branches = 1;
  CHECK_THROWS_AS(mb.validate(), ValidationError);
  MilConfig dims = small_config(Arch::abmil);
  dims.embed_dim = 0;
  CHECK_THROWS_AS(dims.validate(), ValidationError);
  CHECK_THROWS_AS(parse_arch("transformer"), ValidationError);
  for (Arch a : kAllArchs) CHECK(parse_arch(arch_name(a)) == a);
}

TEST_CASE("config round trip through a document") {
  MilConfig c = small_config(Arch::gated_abmil, Task::survival);
  c.head_hidden_dims = {5, 3};
  KvDoc doc;
  c.write(doc);
  const MilConfig back = MilConfig::read(doc);
  CHECK(back.arch == c.arch);
  CHECK(back.task == c.task);
  CHECK(back.head_hidden_dims == c.head_hidden_dims);
  CHECK(back.dropout == c.dropout);
}

TEST_CASE("identical rows give uniform attention and the single-patch embedding") {
  Rng rng(2);
  EmbeddingBag one = random_bag(rng, 1, 6);
  EmbeddingBag many = one;
  many.features = one.features.replicate(5, 1);
  for (Arch a : kAllArchs) {
    CAPTURE(arch_name(a));
    const MilModel m = MilModel::init(small_config(a));
    const auto [s1, att1] = m.aggregate(one);
    const auto [s5, att5] = m.aggregate(many);
    REQUIRE(att1.size() == 1);
    CHECK(att1[0] == doctest::Approx(1.0));
    if (a != Arch::max) {
      for (double w : att5) CHECK(w == doctest::Approx(0.2).epsilon(1e-12));
    }
    // The class token attends over every patch, so only pooling archs collapse.
    if (a != Arch::simple_transmil) CHECK((s1 - s5).cwiseAbs().maxCoeff() < 1e-9);
    if (a == Arch::varmil) {
      const Eigen::Index e = s5.cols() / 2;
      CHECK(s5.rightCols(e).cwiseAbs().maxCoeff() < 1e-12);
    }
  }
}

TEST_CASE("attention is a distribution for every architecture") {
  Rng rng(3);
  for (Arch a : kAllArchs) {
    CAPTURE(arch_name(a));
    const MilModel m = MilModel::init(small_config(a));
    for (int trial = 0; trial < 5; ++trial) {
      const EmbeddingBag b = random_bag(rng, 3 + trial * 4, 6);
      const Prediction p = m.predict(b);
      REQUIRE(p.attention.size() == static_cast<std::size_t>(b.k()));
      for (double w : p.attention) CHECK(w >= 0.0);
      CHECK(std::abs(std::accumulate(p.attention.begin(), p.attention.end(), 0.0) - 1.0) < 1e-9);
      REQUIRE(p.y_hat.has_value());
      CHECK(*p.y_hat > 0.0);
      CHECK(*p.y_hat < 1.0);
      CHECK_FALSE(p.log_hazard.has_value());
      CHECK(p.instance_logits.has_value() == arch_has_instance_branch(a));
    }
  }
}

TEST_CASE("aggregation is permutation equivariant") {
  Rng rng(4);
  for (Arch a : kAllArchs) {
    CAPTURE(arch_name(a));
    const MilModel m = MilModel::init(small_config(a));
    for (int trial = 0; trial < 4; ++trial) {
      const EmbeddingBag b = random_bag(rng, 9, 6);
      std::vector<Eigen::Index> perm(9);
      std::iota(perm.begin(), perm.end(), 0);
      rng.shuffle(std::span<Eigen::Index>(perm));
      EmbeddingBag pb = b;
      for (Eigen::Index i = 0; i < 9; ++i) pb.features.row(i) = b.features.row(perm[static_cast<std::size_t>(i)]);
      const auto [s, att] = m.aggregate(b);
      const auto [ps, patt] = m.aggregate(pb);
      for (Eigen::Index j = 0; j < s.cols(); ++j) CHECK(rel_diff(ps(j), s(j)) < 1e-6);
      for (Eigen::Index i = 0; i < 9; ++i) {
        CHECK(rel_diff(patt[static_cast<std::size_t>(i)], att[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])]) <
              1e-6);
      }
      CHECK(rel_diff(m.predict(pb).score(), m.predict(b).score()) < 1e-6);
    }
  }
}

TEST_CASE("zero head gives y_hat 0.5 and hazard 1") {
  Rng rng(5);
  const EmbeddingBag b = random_bag(rng, 4, 6);
  for (Task task : {Task::classification, Task::survival}) {
    MilModel m = MilModel::init(small_config(Arch::abmil, task));
    for (std::size_t i = 0; i < m.params().size(); ++i) {
      if (m.params().name(i).rfind("head", 0) == 0) m.params().value(i).setZero();
    }
    const Prediction p = m.predict(b);
    if (task == Task::classification) {
      CHECK(*p.y_hat == 0.5);
      CHECK_FALSE(p.log_hazard.has_value());
    } else {
      CHECK(*p.log_hazard == 0.0);
      CHECK(*p.hazard == 1.0);
      CHECK_FALSE(p.y_hat.has_value());
    }
  }
}

TEST_CASE("hand-set two-patch abmil") {
  MilConfig c;
  c.arch = Arch::abmil;
  c.input_dim = 2;
  c.embed_dim = 2;
  c.attn_dim = 1;
  c.head_hidden_dims = {};
  c.dropout = 0.0;
  MilModel m = MilModel::init(c);
  auto& p = m.params();
  p["proj.weight"] << 1.0, 0.5, -0.25, 2.0;
  p["proj.bias"] << 0.1, -0.2;
  p["attn.V"] << 0.3, -0.7;
  p["attn.V.bias"] << 0.05;
  p["attn.w"] << 1.5;
  p["head.0.weight"] << 0.8, -0.6;
  p["head.0.bias"] << 0.2;

  EmbeddingBag b;
  b.slide_id = "S";
  b.patient_id = "P";
  b.encoder = {"toy", 2};
  b.features.resize(2, 2);
  b.features << 1.0f, 2.0f, -0.5f, 0.25f;

  // Hand evaluation.
  const double f[2][2] = {{1.0, 2.0}, {-0.5, 0.25}};
  double h[2][2], score[2];
  for (int i = 0; i < 2; ++i) {
    h[i][0] = std::max(0.0, f[i][0] * 1.0 + f[i][1] * -0.25 + 0.1);
    h[i][1] = std::max(0.0, f[i][0] * 0.5 + f[i][1] * 2.0 - 0.2);
    score[i] = 1.5 * std::tanh(h[i][0] * 0.3 + h[i][1] * -0.7 + 0.05);
  }
  const double z0 = std::exp(score[0]), z1 = std::exp(score[1]);
  const double a0 = z0 / (z0 + z1), a1 = z1 / (z0 + z1);
  const double s0 = a0 * h[0][0] + a1 * h[1][0];
  const double s1 = a0 * h[0][1] + a1 * h[1][1];
  const double logit = 0.8 * s0 - 0.6 * s1 + 0.2;
  const double y = 1.0 / (1.0 + std::exp(-logit));

  const Prediction pr = m.predict(b);
  CHECK(std::abs(*pr.y_hat - y) < 1e-12);
  CHECK(std::abs(pr.attention[0] - a0) < 1e-12);
}

TEST_CASE("dimension mismatch and empty bags are rejected") {
  Rng rng(6);
  const MilModel m = MilModel::init(small_config(Arch::abmil));
  CHECK_THROWS_AS(m.predict(random_bag(rng, 3, 5)), ValidationError);
  ad::Tape t;
  CHECK_THROWS_AS(m.forward(t, ad::Matrix(0, 6)), ValidationError);
}

TEST_CASE("dropout is training only and prediction is deterministic") {
  Rng rng(7);
  const EmbeddingBag b = random_bag(rng, 6, 6);
  const MilModel m = MilModel::init(small_config(Arch::gated_abmil));
  CHECK(m.predict(b).score() == m.predict(b).score());
  ad::Tape t1, t2;
  const double infer = m.forward(t1, to_matrix(b.features)).output.scalar();
  CHECK(infer == m.predict(b).score());
  Rng drop(1);
  const double train = m.forward(t2, to_matrix(b.features), &drop).output.scalar();
  CHECK(train != infer);
}

TEST_CASE("checkpoint round trip") {
  TempDir dir;
  for (Arch a : kAllArchs) {
    const MilModel m = MilModel::init(small_config(a, Task::survival));
    m.save(dir / "m.milm");
    const MilModel back = MilModel::load(dir / "m.milm");
    CHECK(back.params().identical(m.params()));
    CHECK(back.config().arch == a);
    CHECK(back.config().task == Task::survival);
  }
  auto bytes = MilModel::init(small_config(Arch::abmil)).encode();
  bytes[bytes.size() / 2] ^= 0x10;
  CHECK_THROWS_AS(MilModel::decode(bytes), CorruptionError);
  bytes[0] = 'Z';
  CHECK_THROWS_AS(MilModel::decode(bytes), FormatError);
}

TEST_CASE("clam instance targets") {
  const double att[] = {0.7, 0.2, 0.1};
  const auto t = clam_instance_targets(att, 1, 1, 1);
  REQUIRE(t.indices.size() == 2);
  CHECK(t.indices[0] == 0);
  CHECK(t.targets[0] == 1.0);
  CHECK(t.indices[1] == 2);
  CHECK(t.targets[1] == 0.0);
  CHECK_FALSE(t.clamped);

  const std::vector<double> uniform(6, 1.0 / 6.0);
  const auto u = clam_instance_targets(uniform, 2, 2, 0);
  REQUIRE(u.indices.size() == 4);
  CHECK(u.indices[0] == 0);
  CHECK(u.indices[1] == 1);
  CHECK(u.targets[0] == 0.0);
  // Bottom of the ranking: the highest indices.
  CHECK(std::min(u.indices[2], u.indices[3]) == 4);
  CHECK(std::max(u.indices[2], u.indices[3]) == 5);
  CHECK(u.targets[2] == 1.0);

  const auto c = clam_instance_targets(att, 2, 2, 1);
  CHECK(c.clamped);
  CHECK(c.indices.size() == 3);
}

TEST_CASE("clam instance targets match a sort oracle") {
  Rng rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t k = 4 + rng.below(30);
    std::vector<double> att(k);
    for (auto& a : att) a = rng.uniform();
    const int n_pos = 1 + static_cast<int>(rng.below(k / 2));
    const int n_neg = 1 + static_cast<int>(rng.below(k / 2));
    const auto t = clam_instance_targets(att, n_pos, n_neg, 1);
    std::vector<Eigen::Index> order(k);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
      return att[static_cast<std::size_t>(a)] > att[static_cast<std::size_t>(b)];
    });
    std::vector<Eigen::Index> top(order.begin(), order.begin() + n_pos);
    std::vector<Eigen::Index> bottom(order.end() - n_neg, order.end());
    std::vector<Eigen::Index> got_top, got_bottom;
    for (std::size_t i = 0; i < t.indices.size(); ++i) (t.targets[i] == 1.0 ? got_top : got_bottom).push_back(t.indices[i]);
    std::sort(top.begin(), top.end());
    std::sort(bottom.begin(), bottom.end());
    std::sort(got_top.begin(), got_top.end());
    std::sort(got_bottom.begin(), got_bottom.end());
    CHECK(got_top == top);
    CHECK(got_bottom == bottom);
  }
}
