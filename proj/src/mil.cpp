#include "bagforge/mil.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "bagforge/errors.hpp"

namespace bagforge {

using ad::Matrix;
using ad::Tape;
using ad::Var;

std::string_view arch_name(Arch a) {
  switch (a) {
    case Arch::mean:
      return "mean";
    case Arch::max:
      return "max";
    case Arch::abmil:
      return "abmil";
    case Arch::gated_abmil:
      return "gated_abmil";
    case Arch::varmil:
      return "varmil";
    case Arch::clam_sb:
      return "clam_sb";
    case Arch::clam_mb:
      return "clam_mb";
    case Arch::simple_transmil:
      return "simple_transmil";
  }
  return "?";
}

Arch parse_arch(std::string_view name) {
  for (Arch a : {Arch::mean, Arch::max, Arch::abmil, Arch::gated_abmil, Arch::varmil, Arch::clam_sb, Arch::clam_mb,
                 Arch::simple_transmil}) {
    if (arch_name(a) == name) return a;
  }
  throw ValidationError("unsupported architecture '" + std::string(name) + "'");
}

std::string_view task_name(Task t) { return t == Task::classification ? "classification" : "survival"; }

Task parse_task(std::string_view name) {
  if (name == "classification") return Task::classification;
  if (name == "survival") return Task::survival;
  throw ValidationError("unknown task '" + std::string(name) + "' (expected classification or survival)");
}

bool arch_has_instance_branch(Arch a) { return a == Arch::clam_sb || a == Arch::clam_mb; }

void MilConfig::validate() const {
  if (input_dim <= 0) throw ValidationError("model.input_dim must be positive");
  if (embed_dim <= 0) throw ValidationError("model.embed_dim must be positive");
  if (attn_dim <= 0) throw ValidationError("model.attn_dim must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ValidationError("model.dropout must be in [0, 1)");
  for (int h : head_hidden_dims) {
    if (h <= 0) throw ValidationError("model.head_hidden_dims entries must be positive");
  }
  if (arch == Arch::clam_mb && n_branches < 2) throw ValidationError("clam_mb requires n_branches >= 2");
  if (arch == Arch::simple_transmil) {
    if (n_heads <= 0 || embed_dim % n_heads != 0) {
      throw ValidationError("simple_transmil requires embed_dim divisible by n_heads");
    }
  }
  if (!(instance_loss_weight >= 0.0 && instance_loss_weight <= 1.0)) {
    throw ValidationError("model.instance_loss_weight must be in [0, 1]");
  }
  if (instance_k < 0) throw ValidationError("model.instance_k must be >= 0");
}

void MilConfig::write(KvDoc& doc, const std::string& prefix) const {
  doc.set(prefix + "arch", std::string(arch_name(arch)));
  doc.set(prefix + "input_dim", input_dim);
  doc.set(prefix + "embed_dim", embed_dim);
  doc.set(prefix + "attn_dim", attn_dim);
  doc.set(prefix + "dropout", dropout);
  std::string hidden;
  for (std::size_t i = 0; i < head_hidden_dims.size(); ++i) {
    if (i) hidden += ',';
    hidden += std::to_string(head_hidden_dims[i]);
  }
  doc.set(prefix + "head_hidden_dims", hidden);
  doc.set(prefix + "task", std::string(task_name(task)));
  doc.set(prefix + "init_seed", static_cast<std::int64_t>(init_seed));
  doc.set(prefix + "n_branches", n_branches);
  doc.set(prefix + "n_heads", n_heads);
  doc.set(prefix + "instance_loss_weight", instance_loss_weight);
  doc.set(prefix + "instance_k", instance_k);
}

MilConfig MilConfig::read(const KvDoc& doc, const std::string& prefix) { return read(doc, prefix, MilConfig{}); }

MilConfig MilConfig::read(const KvDoc& doc, const std::string& prefix, MilConfig c) {
  if (auto v = doc.find(prefix + "arch")) c.arch = parse_arch(*v);
  c.input_dim = static_cast<int>(doc.get_int(prefix + "input_dim", c.input_dim));
  c.embed_dim = static_cast<int>(doc.get_int(prefix + "embed_dim", c.embed_dim));
  c.attn_dim = static_cast<int>(doc.get_int(prefix + "attn_dim", c.attn_dim));
  c.dropout = doc.get_double(prefix + "dropout", c.dropout);
  if (auto v = doc.find(prefix + "head_hidden_dims")) {
    c.head_hidden_dims.clear();
    if (!trim(*v).empty()) {
      for (const auto& part : split(*v, ',')) {
        c.head_hidden_dims.push_back(static_cast<int>(parse_int(part, prefix + "head_hidden_dims")));
      }
    }
  }
  if (auto v = doc.find(prefix + "task")) c.task = parse_task(*v);
  c.init_seed = static_cast<std::uint64_t>(doc.get_int(prefix + "init_seed", static_cast<std::int64_t>(c.init_seed)));
  c.n_branches = static_cast<int>(doc.get_int(prefix + "n_branches", c.n_branches));
  c.n_heads = static_cast<int>(doc.get_int(prefix + "n_heads", c.n_heads));
  c.instance_loss_weight = doc.get_double(prefix + "instance_loss_weight", c.instance_loss_weight);
  c.instance_k = static_cast<int>(doc.get_int(prefix + "instance_k", c.instance_k));
  return c;
}

InstanceTargets clam_instance_targets(std::span<const double> attention, int n_pos, int n_neg, int slide_label) {
  InstanceTargets out;
  const auto k = static_cast<int>(attention.size());
  n_pos = std::max(n_pos, 0);
  n_neg = std::max(n_neg, 0);
  if (n_pos + n_neg > k) {
    out.clamped = true;
    n_pos = std::min(n_pos, k);
    n_neg = std::min(n_neg, k - n_pos);
  }
  std::vector<Eigen::Index> order(static_cast<std::size_t>(k));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
    return attention[static_cast<std::size_t>(a)] > attention[static_cast<std::size_t>(b)];
  });
  const double pos_target = slide_label ? 1.0 : 0.0;
  for (int i = 0; i < n_pos; ++i) {
    out.indices.push_back(order[static_cast<std::size_t>(i)]);
    out.targets.push_back(pos_target);
  }
  for (int i = k - n_neg; i < k; ++i) {
    out.indices.push_back(order[static_cast<std::size_t>(i)]);
    out.targets.push_back(1.0 - pos_target);
  }
  return out;
}

ad::Matrix to_matrix(const FeatureMatrix& features) { return features.cast<double>(); }

// ---- initialization ----------------------------------------------------------

namespace {

Matrix uniform_fan_in(Rng& rng, Eigen::Index rows, Eigen::Index cols, Eigen::Index fan_in) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-bound, bound);
  return m;
}

void add_linear(ad::ParameterSet& p, Rng& rng, const std::string& name, int in, int out, bool bias = true) {
  p.add(name + ".weight", uniform_fan_in(rng, in, out, in));
  if (bias) p.add(name + ".bias", Matrix::Zero(1, out));
}

void add_head(ad::ParameterSet& p, Rng& rng, const std::string& prefix, int in, const std::vector<int>& hidden) {
  int width = in;
  std::size_t layer = 0;
  for (int h : hidden) {
    add_linear(p, rng, prefix + "." + std::to_string(layer++), width, h);
    width = h;
  }
  add_linear(p, rng, prefix + "." + std::to_string(layer), width, 1);
}

Var linear(Tape& t, const ad::ParameterSet& p, Var x, const std::string& name) {
  Var y = ad::matmul(x, t.parameter(p, name + ".weight"));
  if (p.index_of(name + ".bias")) y = ad::add(y, t.parameter(p, name + ".bias"));
  return y;
}

Var affine_norm(Tape& t, const ad::ParameterSet& p, Var x, const std::string& name) {
  Var y = ad::layer_norm_rows(x);
  y = ad::mul(y, t.parameter(p, name + ".gamma"));
  return ad::add(y, t.parameter(p, name + ".beta"));
}

}  // namespace

MilModel MilModel::init(const MilConfig& config) {
  config.validate();
  MilModel m;
  m.config_ = config;
  Rng rng(Rng::derive(config.init_seed, 0x4d494c4dULL));
  auto& p = m.params_;
  const int d = config.input_dim;
  const int e = config.embed_dim;
  const int a = config.attn_dim;
  add_linear(p, rng, "proj", d, e);
  int slide_width = e;
  switch (config.arch) {
    case Arch::mean:
    case Arch::max:
      break;
    case Arch::abmil:
    case Arch::varmil:
      p.add("attn.V", uniform_fan_in(rng, e, a, e));
      p.add("attn.V.bias", Matrix::Zero(1, a));
      p.add("attn.w", uniform_fan_in(rng, a, 1, a));
      if (config.arch == Arch::varmil) slide_width = 2 * e;
      break;
    case Arch::gated_abmil:
    case Arch::clam_sb:
    case Arch::clam_mb: {
      const int branches = config.arch == Arch::clam_mb ? config.n_branches : 1;
      p.add("attn.V", uniform_fan_in(rng, e, a, e));
      p.add("attn.V.bias", Matrix::Zero(1, a));
      p.add("attn.U", uniform_fan_in(rng, e, a, e));
      p.add("attn.U.bias", Matrix::Zero(1, a));
      p.add("attn.w", uniform_fan_in(rng, a, branches, a));
      if (arch_has_instance_branch(config.arch)) add_linear(p, rng, "inst", e, 1);
      break;
    }
    case Arch::simple_transmil: {
      const int dh = e / config.n_heads;
      p.add("cls", uniform_fan_in(rng, 1, e, e));
      p.add("ln1.gamma", Matrix::Ones(1, e));
      p.add("ln1.beta", Matrix::Zero(1, e));
      for (int h = 0; h < config.n_heads; ++h) {
        const std::string hs = std::to_string(h);
        p.add("attn.q" + hs, uniform_fan_in(rng, e, dh, e));
        p.add("attn.k" + hs, uniform_fan_in(rng, e, dh, e));
        p.add("attn.v" + hs, uniform_fan_in(rng, e, dh, e));
      }
      add_linear(p, rng, "attn.out", e, e);
      p.add("ln2.gamma", Matrix::Ones(1, e));
      p.add("ln2.beta", Matrix::Zero(1, e));
      add_linear(p, rng, "ffn.1", e, e);
      add_linear(p, rng, "ffn.2", e, e);
      p.add("lnf.gamma", Matrix::Ones(1, e));
      p.add("lnf.beta", Matrix::Zero(1, e));
      break;
    }
  }
  if (config.arch == Arch::clam_mb) {
    for (int b = 0; b < config.n_branches; ++b) {
      add_head(p, rng, "head" + std::to_string(b), slide_width, config.head_hidden_dims);
    }
  } else {
    add_head(p, rng, "head", slide_width, config.head_hidden_dims);
  }
  return m;
}

// ---- forward -----------------------------------------------------------------

void MilModel::check_input(const ad::Matrix& features) const {
  if (features.rows() == 0) throw ValidationError("bag has no patches (k = 0)");
  if (features.cols() != config_.input_dim) {
    throw ValidationError("bag feature dim " + std::to_string(features.cols()) + " != model input_dim " +
                          std::to_string(config_.input_dim));
  }
}

Var MilModel::head(Tape& t, Var s, const std::string& prefix) const {
  Var x = s;
  const std::size_t layers = config_.head_hidden_dims.size();
  for (std::size_t i = 0; i < layers; ++i) x = ad::relu(linear(t, params_, x, prefix + "." + std::to_string(i)));
  return linear(t, params_, x, prefix + "." + std::to_string(layers));
}

MilModel::Forward MilModel::forward(Tape& t, const ad::Matrix& features, Rng* dropout_rng) const {
  check_input(features);
  const auto& p = params_;
  const Eigen::Index k = features.rows();
  Forward out;

  Var h = ad::relu(linear(t, p, t.constant(features), "proj"));
  if (dropout_rng != nullptr && config_.dropout > 0.0) {
    const double keep = 1.0 - config_.dropout;
    Matrix mask(h.rows(), h.cols());
    for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = dropout_rng->uniform() < keep ? 1.0 / keep : 0.0;
    h = ad::mul(h, t.constant(std::move(mask)));
  }

  auto attention_scores = [&](bool gated) {
    Var v = ad::tanh(ad::add(ad::matmul(h, t.parameter(p, "attn.V")), t.parameter(p, "attn.V.bias")));
    if (gated) {
      Var u = ad::sigmoid(ad::add(ad::matmul(h, t.parameter(p, "attn.U")), t.parameter(p, "attn.U.bias")));
      v = ad::mul(v, u);
    }
    return ad::matmul(v, t.parameter(p, "attn.w"));  // k x branches
  };

  switch (config_.arch) {
    case Arch::mean: {
      out.embedding = ad::scale(ad::sum_rows(h), 1.0 / static_cast<double>(k));
      out.attention = ad::RowVector::Constant(k, 1.0 / static_cast<double>(k));
      out.output = head(t, out.embedding, "head");
      break;
    }
    case Arch::max: {
      out.embedding = ad::max_rows(h);
      // One-hot on the patch holding the most column maxima (ties -> lowest index).
      const Matrix& hv = h.value();
      std::vector<int> wins(static_cast<std::size_t>(k), 0);
      for (Eigen::Index c = 0; c < hv.cols(); ++c) {
        Eigen::Index best = 0;
        for (Eigen::Index r = 1; r < k; ++r) {
          if (hv(r, c) > hv(best, c)) best = r;
        }
        wins[static_cast<std::size_t>(best)] += 1;
      }
      const auto top = std::max_element(wins.begin(), wins.end()) - wins.begin();
      out.attention = ad::RowVector::Zero(k);
      out.attention(top) = 1.0;
      out.output = head(t, out.embedding, "head");
      break;
    }
    case Arch::abmil:
    case Arch::gated_abmil:
    case Arch::varmil:
    case Arch::clam_sb: {
      const bool gated = config_.arch == Arch::gated_abmil || config_.arch == Arch::clam_sb;
      Var a = ad::softmax_rows(ad::transpose(attention_scores(gated)));  // 1 x k
      Var mu = ad::matmul(a, h);
      if (config_.arch == Arch::varmil) {
        Var var = ad::matmul(a, ad::square(ad::sub(h, mu)));
        const Var parts[] = {mu, var};
        out.embedding = ad::hcat(parts);
      } else {
        out.embedding = mu;
      }
      out.attention = a.value();
      out.branch_attention = a.value();
      if (config_.arch == Arch::clam_sb) out.instance_logits = linear(t, p, h, "inst");
      out.output = head(t, out.embedding, "head");
      break;
    }
    case Arch::clam_mb: {
      const int branches = config_.n_branches;
      Var a = ad::softmax_rows(ad::transpose(attention_scores(true)));  // branches x k
      Var s = ad::matmul(a, h);                                          // branches x e
      std::vector<Var> logits;
      for (int b = 0; b < branches; ++b) {
        const Eigen::Index row[] = {b};
        logits.push_back(head(t, ad::select_rows(s, row), "head" + std::to_string(b)));
      }
      // Log-odds of the last branch's class against the others.
      Var rest = ad::logsumexp(ad::hcat(std::span<const Var>(logits.data(), logits.size() - 1)));
      out.output = ad::sub(logits.back(), rest);
      const Eigen::Index last[] = {branches - 1};
      out.embedding = ad::select_rows(s, last);
      out.branch_attention = a.value();
      out.attention = a.value().colwise().mean();
      out.instance_logits = linear(t, p, h, "inst");
      break;
    }
    case Arch::simple_transmil: {
      const int heads = config_.n_heads;
      const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(config_.embed_dim / heads));
      const Var rows[] = {t.parameter(p, "cls"), h};
      Var tokens = ad::vcat(rows);  // (k+1) x e, class token first
      Var z = affine_norm(t, p, tokens, "ln1");
      const Eigen::Index zero[] = {0};
      Var z_cls = ad::select_rows(z, zero);
      // Only the class-token query is needed: s depends on row 0 alone.
      std::vector<Var> head_out;
      ad::RowVector att_mean = ad::RowVector::Zero(k + 1);
      for (int hd = 0; hd < heads; ++hd) {
        const std::string hs = std::to_string(hd);
        Var q = ad::matmul(z_cls, t.parameter(p, "attn.q" + hs));
        Var keys = ad::matmul(z, t.parameter(p, "attn.k" + hs));
        Var vals = ad::matmul(z, t.parameter(p, "attn.v" + hs));
        Var att = ad::softmax_rows(ad::scale(ad::matmul(q, ad::transpose(keys)), inv_sqrt_dh));
        att_mean += att.value() / static_cast<double>(heads);
        head_out.push_back(ad::matmul(att, vals));
      }
      Var o = linear(t, p, ad::hcat(head_out), "attn.out");
      Var x1 = ad::add(ad::select_rows(tokens, zero), o);
      Var y = affine_norm(t, p, x1, "ln2");
      Var ffn = linear(t, p, ad::relu(linear(t, p, y, "ffn.1")), "ffn.2");
      Var x2 = ad::add(x1, ffn);
      out.embedding = affine_norm(t, p, x2, "lnf");
      ad::RowVector patch_att = att_mean.tail(k);
      out.attention = patch_att / patch_att.sum();
      out.branch_attention = out.attention;
      out.output = head(t, out.embedding, "head");
      break;
    }
  }
  return out;
}

std::pair<ad::RowVector, std::vector<double>> MilModel::aggregate(const EmbeddingBag& bag) const {
  if (bag.encoder.dim != config_.input_dim) {
    throw ValidationError("bag '" + bag.slide_id + "' encoder dim " + std::to_string(bag.encoder.dim) +
                          " != model input_dim " + std::to_string(config_.input_dim));
  }
  Tape t;
  auto fwd = forward(t, to_matrix(bag.features), nullptr);
  ad::RowVector s = fwd.embedding.value();
  return {s, std::vector<double>(fwd.attention.data(), fwd.attention.data() + fwd.attention.size())};
}

Prediction MilModel::predict(const EmbeddingBag& bag) const {
  if (bag.encoder.dim != config_.input_dim) {
    throw ValidationError("bag '" + bag.slide_id + "' encoder dim " + std::to_string(bag.encoder.dim) +
                          " != model input_dim " + std::to_string(config_.input_dim));
  }
  Tape t;
  auto fwd = forward(t, to_matrix(bag.features), nullptr);
  Prediction pred;
  pred.slide_id = bag.slide_id;
  const double out = fwd.output.scalar();
  if (config_.task == Task::classification) {
    pred.logit = out;
    pred.y_hat = out >= 0 ? 1.0 / (1.0 + std::exp(-out)) : std::exp(out) / (1.0 + std::exp(out));
  } else {
    pred.log_hazard = out;
    pred.hazard = std::exp(out);
  }
  pred.attention.assign(fwd.attention.data(), fwd.attention.data() + fwd.attention.size());
  if (fwd.instance_logits) {
    const auto& v = fwd.instance_logits->value();
    pred.instance_logits = std::vector<double>(v.data(), v.data() + v.size());
  }
  return pred;
}

// ---- checkpoint (MILM container) ---------------------------------------------

std::vector<std::uint8_t> MilModel::encode() const {
  KvDoc meta;
  config_.write(meta);
  meta.set("params.count", static_cast<std::int64_t>(params_.size()));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& v = params_.value(i);
    meta.set("param." + std::to_string(i), params_.name(i) + "," + std::to_string(v.rows()) + "," +
                                               std::to_string(v.cols()));
  }
  const std::string text = meta.serialize();
  std::vector<std::uint8_t> out{'M', 'I', 'L', 'M'};
  le::put_u16(out, 1);
  le::put_u32(out, static_cast<std::uint32_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  const std::size_t start = out.size();
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& v = params_.value(i);
    for (Eigen::Index j = 0; j < v.size(); ++j) le::put_f64(out, v.data()[j]);
  }
  le::put_u32(out, crc32_ieee(out.data() + start, out.size() - start));
  return out;
}

MilModel MilModel::decode(const std::vector<std::uint8_t>& bytes, const std::string& origin) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "MILM", 4) != 0) throw FormatError(origin + ": not a model checkpoint");
  if (bytes.size() < 10) throw CorruptionError(origin + ": truncated checkpoint");
  if (le::get_u16(bytes.data() + 4) != 1) throw FormatError(origin + ": unsupported checkpoint version");
  const std::size_t header_len = le::get_u32(bytes.data() + 6);
  if (bytes.size() < 10 + header_len + 4) throw CorruptionError(origin + ": truncated checkpoint");
  const KvDoc meta = KvDoc::parse(std::string(reinterpret_cast<const char*>(bytes.data() + 10), header_len));
  MilModel m = init(MilConfig::read(meta));
  const auto count = meta.get_int("params.count", -1);
  if (count != static_cast<std::int64_t>(m.params_.size())) throw CorruptionError(origin + ": parameter count mismatch");
  std::size_t offset = 10 + header_len;
  const std::size_t start = offset;
  for (std::size_t i = 0; i < m.params_.size(); ++i) {
    const auto fields = split(meta.at("param." + std::to_string(i)), ',');
    auto& v = m.params_.value(i);
    if (fields.size() != 3 || fields[0] != m.params_.name(i) || parse_int(fields[1], "rows") != v.rows() ||
        parse_int(fields[2], "cols") != v.cols()) {
      throw CorruptionError(origin + ": parameter layout mismatch at '" + m.params_.name(i) + "'");
    }
    if (offset + 8 * static_cast<std::size_t>(v.size()) + 4 > bytes.size()) throw CorruptionError(origin + ": truncated");
    for (Eigen::Index j = 0; j < v.size(); ++j, offset += 8) v.data()[j] = le::get_f64(bytes.data() + offset);
  }
  if (offset + 4 != bytes.size()) throw CorruptionError(origin + ": trailing bytes in checkpoint");
  if (crc32_ieee(bytes.data() + start, offset - start) != le::get_u32(bytes.data() + offset)) {
    throw CorruptionError(origin + ": checkpoint checksum mismatch");
  }
  return m;
}

void MilModel::save(const std::filesystem::path& path) const { write_file_bytes(path, encode()); }

MilModel MilModel::load(const std::filesystem::path& path) { return decode(read_file_bytes(path), path.string()); }

}  // namespace bagforge
