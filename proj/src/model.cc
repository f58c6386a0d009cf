#include "treecls/model.h"

#include <algorithm>
#include <cmath>

#include "treecls/error.h"

namespace treecls {

// ---- vocabulary -------------------------------------------------------------

Vocabulary::Vocabulary(std::vector<std::string> tokens)
    : tokens_(std::move(tokens)) {
  for (size_t i = 0; i < tokens_.size(); ++i) {
    index_[tokens_[i]] = static_cast<int>(i);
  }
  auto it = index_.find(kUnkToken);
  if (it == index_.end()) throw ConfigError("vocabulary is missing <UNK>");
  unk_id_ = it->second;
}

int Vocabulary::lookup(const std::string& token) const {
  auto it = index_.find(token);
  if (it == index_.end()) {
    ++oov_count_;
    return unk_id_;
  }
  return it->second;
}

int Vocabulary::id_of(const std::string& token) const {
  auto it = index_.find(token);
  if (it == index_.end()) throw ConfigError("token '" + token + "' not in vocabulary");
  return it->second;
}

std::vector<int> Vocabulary::ids_for(const std::vector<std::string>& tokens) const {
  std::vector<int> ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) ids.push_back(lookup(t));
  return ids;
}

// ---- parameters -------------------------------------------------------------

Parameter* ParamSet::create(const std::string& name,
                            const std::vector<int>& shape, Precision precision) {
  if (index_.count(name)) throw ConfigError("duplicate parameter name " + name);
  params_.push_back(std::make_unique<Parameter>(name, Tensor::zeros(shape, precision)));
  index_[name] = params_.back().get();
  return params_.back().get();
}

Parameter* ParamSet::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter " + name);
  return it->second;
}

std::vector<Parameter*> ParamSet::all() {
  std::vector<Parameter*> out;
  for (auto& p : params_) out.push_back(p.get());
  return out;
}

std::vector<const Parameter*> ParamSet::all() const {
  std::vector<const Parameter*> out;
  for (const auto& p : params_) out.push_back(p.get());
  return out;
}

void ParamSet::zero_grads() {
  for (auto& p : params_) p->zero_grad();
}

int64_t ParamSet::count() const {
  int64_t n = 0;
  for (const auto& p : params_) n += p->value.numel();
  return n;
}

void ParamSet::copy_values_from(const ParamSet& other) {
  for (auto& p : params_) {
    for (const auto& q : other.params_) {
      if (q->name == p->name) {
        if (q->value.shape != p->value.shape) {
          throw ShapeError("parameter " + p->name + " shape mismatch");
        }
        p->value.data = q->value.data;
        break;
      }
    }
  }
}

namespace {

Parameter* glorot(ParamSet& ps, const std::string& name, int in, int out,
                  Rng& rng, Precision prec) {
  Parameter* p = ps.create(name, {in, out}, prec);
  double lim = std::sqrt(6.0 / (in + out));
  for (double& v : p->value.data) v = (2.0 * rng.real() - 1.0) * lim;
  p->value.round_to_precision();
  return p;
}

Parameter* normal_init(ParamSet& ps, const std::string& name,
                       const std::vector<int>& shape, double stddev, Rng& rng,
                       Precision prec) {
  Parameter* p = ps.create(name, shape, prec);
  for (double& v : p->value.data) v = rng.normal() * stddev;
  p->value.round_to_precision();
  return p;
}

Parameter* zeros_init(ParamSet& ps, const std::string& name,
                      const std::vector<int>& shape, Precision prec) {
  return ps.create(name, shape, prec);
}

Parameter* ones_init(ParamSet& ps, const std::string& name,
                     const std::vector<int>& shape, Precision prec) {
  Parameter* p = ps.create(name, shape, prec);
  std::fill(p->value.data.begin(), p->value.data.end(), 1.0);
  return p;
}

std::vector<int> iota_ids(int n) {
  std::vector<int> ids(n);
  for (int i = 0; i < n; ++i) ids[i] = i;
  return ids;
}

}  // namespace

// ---- encoder input ----------------------------------------------------------

EncoderInput make_encoder_input(const AnnotatedInstance& inst,
                                const Vocabulary& vocab,
                                const EncoderConfig& config) {
  EncoderInput input;
  input.token_ids = vocab.ids_for(inst.layout.tokens);
  int n = inst.layout.size();
  if (config.plain_attention) return input;

  if (config.structure_labels()) {
    MaskSet set = build_mask_set(inst, config.mode, config.use_cross_links);
    input.attn_labels = set.soft->label;
    if (set.hard) input.hard = set.hard->allowed;
  } else {
    input.attn_labels.resize(static_cast<size_t>(n) * n);
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) {
        int d = std::clamp(j - i, -kPositionClip, kPositionClip);
        input.attn_labels[static_cast<size_t>(i) * n + j] = d + kPositionClip;
      }
    }
    if (config.mode == MaskMode::kHard || config.mode == MaskMode::kBlock) {
      MaskSet set = build_mask_set(inst, config.mode, config.use_cross_links);
      input.hard = set.hard->allowed;
    }
  }
  return input;
}

// ---- relative attention -------------------------------------------------------

Var relative_attention(Tape& t, Var queries, Var keys, Var values,
                       const std::vector<int>& labels, Var label_table_k,
                       Var label_table_v, bool use_value_labels,
                       const std::vector<uint8_t>& hard, int heads) {
  const Tensor& q = t.val(queries);
  const Tensor& k = t.val(keys);
  int nq = q.rows(), nk = k.rows(), hidden = q.cols();
  if (hidden % heads != 0) {
    throw ShapeError("hidden " + std::to_string(hidden) +
                     " not divisible by heads " + std::to_string(heads));
  }
  if (!labels.empty() && (nq != nk || labels.size() != static_cast<size_t>(nq) * nk)) {
    throw ShapeError("labels must be square over the sequence positions");
  }
  int dh = hidden / heads;
  double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  std::vector<Var> contexts;
  for (int h = 0; h < heads; ++h) {
    Var qh = slice(t, queries, 0, nq, h * dh, (h + 1) * dh);
    Var kh = slice(t, keys, 0, nk, h * dh, (h + 1) * dh);
    Var vh = slice(t, values, 0, nk, h * dh, (h + 1) * dh);
    Var scores = matmul_nt(t, qh, kh);
    if (!labels.empty()) {
      Var proj = matmul_nt(t, qh, label_table_k);  // [nq, label_count]
      scores = add(t, scores, relation_gather(t, proj, labels));
    }
    scores = scale(t, scores, inv_sqrt);
    Var probs = masked_softmax(t, scores, hard);
    Var ctx = matmul(t, probs, vh);
    if (use_value_labels && !labels.empty()) {
      ctx = add(t, ctx, relation_context(t, probs, label_table_v, labels));
    }
    contexts.push_back(ctx);
  }
  return contexts.size() == 1 ? contexts[0] : concat(t, contexts, 1);
}

// ---- shared transformer pieces -----------------------------------------------

namespace {

struct AttnParams {
  Parameter *wq, *bq, *wk, *bk, *wv, *bv, *wo, *bo, *ln_g, *ln_b;
  Parameter *ltk = nullptr, *ltv = nullptr;
};

struct FfnParams {
  Parameter *w1, *b1, *w2, *b2, *ln_g, *ln_b;
};

AttnParams make_attn_params(ParamSet& ps, const std::string& prefix, int hidden,
                            Rng& rng, Precision prec) {
  AttnParams p;
  p.wq = glorot(ps, prefix + ".wq", hidden, hidden, rng, prec);
  p.bq = zeros_init(ps, prefix + ".bq", {hidden}, prec);
  p.wk = glorot(ps, prefix + ".wk", hidden, hidden, rng, prec);
  p.bk = zeros_init(ps, prefix + ".bk", {hidden}, prec);
  p.wv = glorot(ps, prefix + ".wv", hidden, hidden, rng, prec);
  p.bv = zeros_init(ps, prefix + ".bv", {hidden}, prec);
  p.wo = glorot(ps, prefix + ".wo", hidden, hidden, rng, prec);
  p.bo = zeros_init(ps, prefix + ".bo", {hidden}, prec);
  p.ln_g = ones_init(ps, prefix + ".ln.g", {hidden}, prec);
  p.ln_b = zeros_init(ps, prefix + ".ln.b", {hidden}, prec);
  return p;
}

FfnParams make_ffn_params(ParamSet& ps, const std::string& prefix, int hidden,
                          int filter, Rng& rng, Precision prec) {
  FfnParams p;
  p.w1 = glorot(ps, prefix + ".w1", hidden, filter, rng, prec);
  p.b1 = zeros_init(ps, prefix + ".b1", {filter}, prec);
  p.w2 = glorot(ps, prefix + ".w2", filter, hidden, rng, prec);
  p.b2 = zeros_init(ps, prefix + ".b2", {hidden}, prec);
  p.ln_g = ones_init(ps, prefix + ".ln.g", {hidden}, prec);
  p.ln_b = zeros_init(ps, prefix + ".ln.b", {hidden}, prec);
  return p;
}

// Post-LN residual attention sublayer. x_kv == x_q gives self attention.
Var attn_sublayer(Tape& t, const AttnParams& p, Var x_q, Var x_kv,
                  const std::vector<int>& labels, Var ltk, Var ltv,
                  bool value_labels, const std::vector<uint8_t>& hard,
                  int heads, double drop, Rng* rng, bool training) {
  Var q = add(t, matmul(t, x_q, t.param(*p.wq)), t.param(*p.bq));
  Var k = add(t, matmul(t, x_kv, t.param(*p.wk)), t.param(*p.bk));
  Var v = add(t, matmul(t, x_kv, t.param(*p.wv)), t.param(*p.bv));
  Var ctx = relative_attention(t, q, k, v, labels, ltk, ltv, value_labels,
                               hard, heads);
  Var out = add(t, matmul(t, ctx, t.param(*p.wo)), t.param(*p.bo));
  if (rng) out = dropout(t, out, drop, *rng, training);
  return layer_norm(t, add(t, x_q, out), t.param(*p.ln_g), t.param(*p.ln_b));
}

Var ffn_sublayer(Tape& t, const FfnParams& p, Var x, double drop, Rng* rng,
                 bool training) {
  Var h = relu(t, add(t, matmul(t, x, t.param(*p.w1)), t.param(*p.b1)));
  Var out = add(t, matmul(t, h, t.param(*p.w2)), t.param(*p.b2));
  if (rng) out = dropout(t, out, drop, *rng, training);
  return layer_norm(t, add(t, x, out), t.param(*p.ln_g), t.param(*p.ln_b));
}

}  // namespace

// ---- encoder classifier --------------------------------------------------------

EncoderClassifier::EncoderClassifier(const EncoderConfig& config, uint64_t init_seed)
    : config_(config) {
  if (config_.hidden_size % config_.heads != 0) {
    throw ConfigError("hidden_size must be divisible by heads");
  }
  if (config_.vocab_size <= 0) throw ConfigError("vocab_size not set");
  Rng rng(init_seed);
  Precision prec = config_.precision;
  int H = config_.hidden_size;
  normal_init(params_, "tok_emb", {config_.vocab_size, H}, 0.02, rng, prec);
  if (config_.absolute_positions()) {
    normal_init(params_, "pos_emb", {config_.max_positions, H}, 0.02, rng, prec);
  }
  int dh = H / config_.heads;
  for (int l = 0; l < config_.layers; ++l) {
    std::string prefix = "layer" + std::to_string(l);
    make_attn_params(params_, prefix + ".attn", H, rng, prec);
    if (!config_.plain_attention) {
      normal_init(params_, prefix + ".attn.label_k",
                  {config_.attention_label_count(), dh}, 0.02, rng, prec);
      if (config_.value_side_labels) {
        normal_init(params_, prefix + ".attn.label_v",
                    {config_.attention_label_count(), dh}, 0.02, rng, prec);
      }
    }
    make_ffn_params(params_, prefix + ".ffn", H, config_.filter_size, rng, prec);
  }
  glorot(params_, "cls.w", H, 2, rng, prec);
  zeros_init(params_, "cls.b", {2}, prec);
}

Var EncoderClassifier::forward(Tape& t, const EncoderInput& input,
                               Rng* dropout_rng, bool training) const {
  Var hidden = forward_hidden(t, input, dropout_rng, training);
  Var cls = slice(t, hidden, 0, 1, 0, config_.hidden_size);
  return add(t, matmul(t, cls, t.param(*params_.get("cls.w"))),
             t.param(*params_.get("cls.b")));
}

Var EncoderClassifier::forward_hidden(Tape& t, const EncoderInput& input,
                                      Rng* dropout_rng, bool training) const {
  int n = static_cast<int>(input.token_ids.size());
  if (n > config_.max_positions) {
    throw ShapeError("layout length " + std::to_string(n) +
                     " exceeds max_positions " +
                     std::to_string(config_.max_positions));
  }
  Var x = embedding_gather(t, t.param(*params_.get("tok_emb")), input.token_ids);
  if (config_.absolute_positions()) {
    Var pos = embedding_gather(t, t.param(*params_.get("pos_emb")), iota_ids(n));
    x = add(t, x, pos);
  }
  if (dropout_rng) x = dropout(t, x, config_.dropout, *dropout_rng, training);

  for (int l = 0; l < config_.layers; ++l) {
    std::string prefix = "layer" + std::to_string(l);
    AttnParams ap;
    ap.wq = params_.get(prefix + ".attn.wq");
    ap.bq = params_.get(prefix + ".attn.bq");
    ap.wk = params_.get(prefix + ".attn.wk");
    ap.bk = params_.get(prefix + ".attn.bk");
    ap.wv = params_.get(prefix + ".attn.wv");
    ap.bv = params_.get(prefix + ".attn.bv");
    ap.wo = params_.get(prefix + ".attn.wo");
    ap.bo = params_.get(prefix + ".attn.bo");
    ap.ln_g = params_.get(prefix + ".attn.ln.g");
    ap.ln_b = params_.get(prefix + ".attn.ln.b");
    Var ltk = -1, ltv = -1;
    if (!config_.plain_attention) {
      ltk = t.param(*params_.get(prefix + ".attn.label_k"));
      if (config_.value_side_labels) {
        ltv = t.param(*params_.get(prefix + ".attn.label_v"));
      }
    }
    x = attn_sublayer(t, ap, x, x, input.attn_labels, ltk, ltv,
                      config_.value_side_labels, input.hard, config_.heads,
                      config_.dropout, dropout_rng, training);
    FfnParams fp;
    fp.w1 = params_.get(prefix + ".ffn.w1");
    fp.b1 = params_.get(prefix + ".ffn.b1");
    fp.w2 = params_.get(prefix + ".ffn.w2");
    fp.b2 = params_.get(prefix + ".ffn.b2");
    fp.ln_g = params_.get(prefix + ".ffn.ln.g");
    fp.ln_b = params_.get(prefix + ".ffn.ln.b");
    x = ffn_sublayer(t, fp, x, config_.dropout, dropout_rng, training);
  }
  return x;
}

// ---- LSTM classifier -----------------------------------------------------------

LstmClassifier::LstmClassifier(const LstmConfig& config, uint64_t init_seed)
    : config_(config) {
  if (config_.vocab_size <= 0) throw ConfigError("vocab_size not set");
  Rng rng(init_seed);
  Precision prec = config_.precision;
  int h = config_.hidden_size;
  normal_init(params_, "emb", {config_.vocab_size, h}, 0.02, rng, prec);
  for (int l = 0; l < config_.layers; ++l) {
    int in = l == 0 ? h : 2 * h;
    for (const char* dir : {"fwd", "bwd"}) {
      std::string prefix =
          "lstm" + std::to_string(l) + "." + dir;
      glorot(params_, prefix + ".w", in + h, 4 * h, rng, prec);
      Parameter* b = zeros_init(params_, prefix + ".b", {4 * h}, prec);
      // Forget-gate bias starts at 1.
      for (int i = h; i < 2 * h; ++i) b->value.data[i] = 1.0;
    }
  }
  glorot(params_, "dense1.w", 2 * h, config_.dense_hidden, rng, prec);
  zeros_init(params_, "dense1.b", {config_.dense_hidden}, prec);
  glorot(params_, "dense2.w", config_.dense_hidden, 2, rng, prec);
  zeros_init(params_, "dense2.b", {2}, prec);
}

namespace {

// One LSTM cell step over a [1,in] input row; gate order i,f,g,o.
std::pair<Var, Var> lstm_cell(Tape& t, Var x_row, Var h_prev, Var c_prev,
                              Parameter& w, Parameter& b, int hidden) {
  Var z = add(t, matmul(t, concat(t, {x_row, h_prev}, 1), t.param(w)), t.param(b));
  Var i = sigmoid_op(t, slice(t, z, 0, 1, 0, hidden));
  Var f = sigmoid_op(t, slice(t, z, 0, 1, hidden, 2 * hidden));
  Var g = tanh_op(t, slice(t, z, 0, 1, 2 * hidden, 3 * hidden));
  Var o = sigmoid_op(t, slice(t, z, 0, 1, 3 * hidden, 4 * hidden));
  Var c = add(t, mul(t, f, c_prev), mul(t, i, g));
  Var h = mul(t, o, tanh_op(t, c));
  return {h, c};
}

}  // namespace

Var LstmClassifier::forward(Tape& t, const std::vector<int>& token_ids,
                            Rng* dropout_rng, bool training) const {
  int n = static_cast<int>(token_ids.size());
  int h = config_.hidden_size;
  Var emb = embedding_gather(t, t.param(*params_.get("emb")), token_ids);
  std::vector<Var> layer_in(n);
  for (int i = 0; i < n; ++i) layer_in[i] = slice(t, emb, i, i + 1, 0, h);

  Var fwd_last = -1, bwd_last = -1;
  for (int l = 0; l < config_.layers; ++l) {
    std::string base = "lstm" + std::to_string(l);
    Parameter& wf = *params_.get(base + ".fwd.w");
    Parameter& bf = *params_.get(base + ".fwd.b");
    Parameter& wb = *params_.get(base + ".bwd.w");
    Parameter& bb = *params_.get(base + ".bwd.b");

    std::vector<Var> fwd_h(n), bwd_h(n);
    Var hh = t.leaf(Tensor::zeros({1, h}, config_.precision));
    Var cc = t.leaf(Tensor::zeros({1, h}, config_.precision));
    for (int i = 0; i < n; ++i) {
      auto [nh, nc] = lstm_cell(t, layer_in[i], hh, cc, wf, bf, h);
      hh = nh;
      cc = nc;
      fwd_h[i] = nh;
    }
    fwd_last = hh;
    hh = t.leaf(Tensor::zeros({1, h}, config_.precision));
    cc = t.leaf(Tensor::zeros({1, h}, config_.precision));
    for (int i = n - 1; i >= 0; --i) {
      auto [nh, nc] = lstm_cell(t, layer_in[i], hh, cc, wb, bb, h);
      hh = nh;
      cc = nc;
      bwd_h[i] = nh;
    }
    bwd_last = hh;

    for (int i = 0; i < n; ++i) {
      Var both = concat(t, {fwd_h[i], bwd_h[i]}, 1);
      if (dropout_rng && l + 1 < config_.layers) {
        both = dropout(t, both, config_.dropout, *dropout_rng, training);
      }
      layer_in[i] = both;
    }
  }

  Var final_state = concat(t, {fwd_last, bwd_last}, 1);
  if (dropout_rng) {
    final_state = dropout(t, final_state, config_.dropout, *dropout_rng, training);
  }
  Var d1 = relu(t, add(t, matmul(t, final_state, t.param(*params_.get("dense1.w"))),
                       t.param(*params_.get("dense1.b"))));
  return add(t, matmul(t, d1, t.param(*params_.get("dense2.w"))),
             t.param(*params_.get("dense2.b")));
}

// ---- sequence-to-sequence model -------------------------------------------------

Seq2SeqModel::Seq2SeqModel(const Seq2SeqConfig& config, uint64_t init_seed)
    : config_(config) {
  if (config_.vocab_size <= 0) throw ConfigError("vocab_size not set");
  if (config_.hidden_size % config_.heads != 0) {
    throw ConfigError("hidden_size must be divisible by heads");
  }
  Rng rng(init_seed);
  Precision prec = config_.precision;
  int H = config_.hidden_size;
  normal_init(params_, "enc.tok_emb", {config_.vocab_size, H}, 0.02, rng, prec);
  normal_init(params_, "enc.pos_emb", {config_.max_positions, H}, 0.02, rng, prec);
  for (int l = 0; l < config_.layers; ++l) {
    std::string p = "enc.layer" + std::to_string(l);
    make_attn_params(params_, p + ".attn", H, rng, prec);
    make_ffn_params(params_, p + ".ffn", H, config_.filter_size, rng, prec);
  }
  normal_init(params_, "dec.tok_emb", {config_.vocab_size, H}, 0.02, rng, prec);
  normal_init(params_, "dec.pos_emb", {config_.max_positions, H}, 0.02, rng, prec);
  for (int l = 0; l < config_.layers; ++l) {
    std::string p = "dec.layer" + std::to_string(l);
    make_attn_params(params_, p + ".self", H, rng, prec);
    make_attn_params(params_, p + ".cross", H, rng, prec);
    make_ffn_params(params_, p + ".ffn", H, config_.filter_size, rng, prec);
  }
  glorot(params_, "dec.out.w", H, config_.vocab_size, rng, prec);
  zeros_init(params_, "dec.out.b", {config_.vocab_size}, prec);
}

namespace {

AttnParams fetch_attn(ParamSet& ps, const std::string& prefix) {
  AttnParams p;
  p.wq = ps.get(prefix + ".wq");
  p.bq = ps.get(prefix + ".bq");
  p.wk = ps.get(prefix + ".wk");
  p.bk = ps.get(prefix + ".bk");
  p.wv = ps.get(prefix + ".wv");
  p.bv = ps.get(prefix + ".bv");
  p.wo = ps.get(prefix + ".wo");
  p.bo = ps.get(prefix + ".bo");
  p.ln_g = ps.get(prefix + ".ln.g");
  p.ln_b = ps.get(prefix + ".ln.b");
  return p;
}

FfnParams fetch_ffn(ParamSet& ps, const std::string& prefix) {
  FfnParams p;
  p.w1 = ps.get(prefix + ".w1");
  p.b1 = ps.get(prefix + ".b1");
  p.w2 = ps.get(prefix + ".w2");
  p.b2 = ps.get(prefix + ".b2");
  p.ln_g = ps.get(prefix + ".ln.g");
  p.ln_b = ps.get(prefix + ".ln.b");
  return p;
}

std::vector<uint8_t> causal_mask(int n) {
  std::vector<uint8_t> mask(static_cast<size_t>(n) * n, 0);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j <= i; ++j) mask[static_cast<size_t>(i) * n + j] = 1;
  }
  return mask;
}

const std::vector<int> kNoLabels;
const std::vector<uint8_t> kNoMask;

}  // namespace

Var Seq2SeqModel::loss(Tape& t, const std::vector<int>& src_ids,
                       const std::vector<int>& tgt_ids, Rng* dropout_rng,
                       bool training) const {
  int ns = static_cast<int>(src_ids.size());
  if (ns > config_.max_positions) throw ShapeError("source too long");
  Var enc = embedding_gather(t, t.param(*params_.get("enc.tok_emb")), src_ids);
  enc = add(t, enc,
            embedding_gather(t, t.param(*params_.get("enc.pos_emb")), iota_ids(ns)));
  if (dropout_rng) enc = dropout(t, enc, config_.dropout, *dropout_rng, training);
  for (int l = 0; l < config_.layers; ++l) {
    std::string p = "enc.layer" + std::to_string(l);
    enc = attn_sublayer(t, fetch_attn(params_, p + ".attn"), enc, enc, kNoLabels,
                        -1, -1, false, kNoMask, config_.heads, config_.dropout,
                        dropout_rng, training);
    enc = ffn_sublayer(t, fetch_ffn(params_, p + ".ffn"), enc, config_.dropout,
                       dropout_rng, training);
  }

  std::vector<int> dec_in{config_.bos_id};
  dec_in.insert(dec_in.end(), tgt_ids.begin(), tgt_ids.end());
  std::vector<int> targets = tgt_ids;
  targets.push_back(config_.eos_id);
  int nt = static_cast<int>(dec_in.size());
  if (nt > config_.max_positions) throw ShapeError("target too long");

  Var dec = embedding_gather(t, t.param(*params_.get("dec.tok_emb")), dec_in);
  dec = add(t, dec,
            embedding_gather(t, t.param(*params_.get("dec.pos_emb")), iota_ids(nt)));
  if (dropout_rng) dec = dropout(t, dec, config_.dropout, *dropout_rng, training);
  auto causal = causal_mask(nt);
  for (int l = 0; l < config_.layers; ++l) {
    std::string p = "dec.layer" + std::to_string(l);
    dec = attn_sublayer(t, fetch_attn(params_, p + ".self"), dec, dec, kNoLabels,
                        -1, -1, false, causal, config_.heads, config_.dropout,
                        dropout_rng, training);
    dec = attn_sublayer(t, fetch_attn(params_, p + ".cross"), dec, enc, kNoLabels,
                        -1, -1, false, kNoMask, config_.heads, config_.dropout,
                        dropout_rng, training);
    dec = ffn_sublayer(t, fetch_ffn(params_, p + ".ffn"), dec, config_.dropout,
                       dropout_rng, training);
  }
  Var logits = add(t, matmul(t, dec, t.param(*params_.get("dec.out.w"))),
                   t.param(*params_.get("dec.out.b")));
  std::vector<Var> losses;
  for (int i = 0; i < nt; ++i) {
    Var row = slice(t, logits, i, i + 1, 0, config_.vocab_size);
    losses.push_back(cross_entropy(t, row, targets[i]));
  }
  Var total = losses[0];
  for (size_t i = 1; i < losses.size(); ++i) total = add(t, total, losses[i]);
  return scale(t, total, 1.0 / nt);
}

// ---- plain-array decode path -----------------------------------------------

namespace {

using Vec = std::vector<double>;

// y += x.W + b over row-major W [in,out].
void linear_into(const Vec& x, const Tensor& w, const Tensor& b, Vec& y) {
  int in = w.rows(), out = w.cols();
  y.assign(out, 0.0);
  for (int k = 0; k < in; ++k) {
    double xv = x[k];
    const double* wrow = w.data.data() + static_cast<size_t>(k) * out;
    for (int j = 0; j < out; ++j) y[j] += xv * wrow[j];
  }
  for (int j = 0; j < out; ++j) y[j] += b.data[j];
}

void layer_norm_plain(Vec& x, const Tensor& g, const Tensor& b,
                      double epsilon = 1e-6) {
  int d = static_cast<int>(x.size());
  double mu = 0.0;
  for (double v : x) mu += v;
  mu /= d;
  double var = 0.0;
  for (double v : x) var += (v - mu) * (v - mu);
  var /= d;
  double inv = 1.0 / std::sqrt(var + epsilon);
  for (int j = 0; j < d; ++j) x[j] = (x[j] - mu) * inv * g.data[j] + b.data[j];
}

// Multi-head attention of a single query row over cached keys/values laid
// out as [t, H] flattened.
void attend_plain(const Vec& q, const Vec& keys, const Vec& values, int t_len,
                  int heads, int hidden, Vec& out) {
  int dh = hidden / heads;
  double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  out.assign(hidden, 0.0);
  std::vector<double> scores(t_len);
  for (int h = 0; h < heads; ++h) {
    int off = h * dh;
    double mx = -1e300;
    for (int j = 0; j < t_len; ++j) {
      double s = 0.0;
      const double* krow = keys.data() + static_cast<size_t>(j) * hidden + off;
      for (int d = 0; d < dh; ++d) s += q[off + d] * krow[d];
      scores[j] = s * inv_sqrt;
      mx = std::max(mx, scores[j]);
    }
    double denom = 0.0;
    for (int j = 0; j < t_len; ++j) {
      scores[j] = std::exp(scores[j] - mx);
      denom += scores[j];
    }
    for (int j = 0; j < t_len; ++j) {
      double p = scores[j] / denom;
      const double* vrow = values.data() + static_cast<size_t>(j) * hidden + off;
      for (int d = 0; d < dh; ++d) out[off + d] += p * vrow[d];
    }
  }
}

}  // namespace

struct Seq2SeqModel::DecodeContext {
  // Cross-attention keys/values per decoder layer, [src_len, H] flattened.
  std::vector<Vec> cross_k, cross_v;
  int src_len = 0;
};

void Seq2SeqModel::encode_plain(const std::vector<int>& src_ids,
                                DecodeContext& ctx) const {
  int ns = static_cast<int>(src_ids.size());
  int H = config_.hidden_size;
  const Tensor& tok = params_.get("enc.tok_emb")->value;
  const Tensor& pos = params_.get("enc.pos_emb")->value;

  std::vector<Vec> x(ns, Vec(H));
  for (int i = 0; i < ns; ++i) {
    for (int j = 0; j < H; ++j) {
      x[i][j] = tok.at(src_ids[i], j) + pos.at(i, j);
    }
  }
  Vec keys(static_cast<size_t>(ns) * H), vals(static_cast<size_t>(ns) * H);
  Vec tmp, ctxv;
  for (int l = 0; l < config_.layers; ++l) {
    std::string p = "enc.layer" + std::to_string(l);
    AttnParams ap = fetch_attn(params_, p + ".attn");
    FfnParams fp = fetch_ffn(params_, p + ".ffn");
    std::vector<Vec> qrows(ns);
    for (int i = 0; i < ns; ++i) {
      linear_into(x[i], ap.wq->value, ap.bq->value, qrows[i]);
      linear_into(x[i], ap.wk->value, ap.bk->value, tmp);
      std::copy(tmp.begin(), tmp.end(), keys.begin() + static_cast<size_t>(i) * H);
      linear_into(x[i], ap.wv->value, ap.bv->value, tmp);
      std::copy(tmp.begin(), tmp.end(), vals.begin() + static_cast<size_t>(i) * H);
    }
    for (int i = 0; i < ns; ++i) {
      attend_plain(qrows[i], keys, vals, ns, config_.heads, H, ctxv);
      linear_into(ctxv, ap.wo->value, ap.bo->value, tmp);
      for (int j = 0; j < H; ++j) tmp[j] += x[i][j];
      layer_norm_plain(tmp, ap.ln_g->value, ap.ln_b->value);
      x[i] = tmp;
    }
    for (int i = 0; i < ns; ++i) {
      linear_into(x[i], fp.w1->value, fp.b1->value, tmp);
      for (double& v : tmp) v = v > 0.0 ? v : 0.0;
      Vec h2;
      linear_into(tmp, fp.w2->value, fp.b2->value, h2);
      for (int j = 0; j < H; ++j) h2[j] += x[i][j];
      layer_norm_plain(h2, fp.ln_g->value, fp.ln_b->value);
      x[i] = h2;
    }
  }

  ctx.src_len = ns;
  ctx.cross_k.assign(config_.layers, Vec(static_cast<size_t>(ns) * H));
  ctx.cross_v.assign(config_.layers, Vec(static_cast<size_t>(ns) * H));
  for (int l = 0; l < config_.layers; ++l) {
    AttnParams ap = fetch_attn(params_, "dec.layer" + std::to_string(l) + ".cross");
    for (int i = 0; i < ns; ++i) {
      linear_into(x[i], ap.wk->value, ap.bk->value, tmp);
      std::copy(tmp.begin(), tmp.end(),
                ctx.cross_k[l].begin() + static_cast<size_t>(i) * H);
      linear_into(x[i], ap.wv->value, ap.bv->value, tmp);
      std::copy(tmp.begin(), tmp.end(),
                ctx.cross_v[l].begin() + static_cast<size_t>(i) * H);
    }
  }
}

namespace {

struct BeamState {
  std::vector<int> tokens;  // starts with BOS
  double log_prob = 0.0;
  // Per layer growing self-attention caches, [t, H] flattened.
  std::vector<std::vector<double>> self_k, self_v;
};

}  // namespace

std::vector<double> Seq2SeqModel::next_token_log_probs(
    const std::vector<int>& src_ids, const std::vector<int>& prefix_with_bos) const {
  DecodeContext ctx;
  encode_plain(src_ids, ctx);
  int H = config_.hidden_size;
  BeamState beam;
  beam.self_k.assign(config_.layers, {});
  beam.self_v.assign(config_.layers, {});

  const Tensor& tok = params_.get("dec.tok_emb")->value;
  const Tensor& pos = params_.get("dec.pos_emb")->value;
  std::vector<double> log_probs;
  Vec x(H), tmp, ctxv;
  for (size_t step = 0; step < prefix_with_bos.size(); ++step) {
    int token = prefix_with_bos[step];
    for (int j = 0; j < H; ++j) {
      x[j] = tok.at(token, j) + pos.at(static_cast<int>(step), j);
    }
    for (int l = 0; l < config_.layers; ++l) {
      std::string p = "dec.layer" + std::to_string(l);
      AttnParams sp = fetch_attn(params_, p + ".self");
      Vec q;
      linear_into(x, sp.wq->value, sp.bq->value, q);
      linear_into(x, sp.wk->value, sp.bk->value, tmp);
      beam.self_k[l].insert(beam.self_k[l].end(), tmp.begin(), tmp.end());
      linear_into(x, sp.wv->value, sp.bv->value, tmp);
      beam.self_v[l].insert(beam.self_v[l].end(), tmp.begin(), tmp.end());
      int t_len = static_cast<int>(step) + 1;
      attend_plain(q, beam.self_k[l], beam.self_v[l], t_len, config_.heads, H, ctxv);
      linear_into(ctxv, sp.wo->value, sp.bo->value, tmp);
      for (int j = 0; j < H; ++j) tmp[j] += x[j];
      layer_norm_plain(tmp, sp.ln_g->value, sp.ln_b->value);
      x = tmp;

      AttnParams cp = fetch_attn(params_, p + ".cross");
      linear_into(x, cp.wq->value, cp.bq->value, q);
      attend_plain(q, ctx.cross_k[l], ctx.cross_v[l], ctx.src_len, config_.heads,
                   H, ctxv);
      linear_into(ctxv, cp.wo->value, cp.bo->value, tmp);
      for (int j = 0; j < H; ++j) tmp[j] += x[j];
      layer_norm_plain(tmp, cp.ln_g->value, cp.ln_b->value);
      x = tmp;

      FfnParams fp = fetch_ffn(params_, p + ".ffn");
      Vec h1;
      linear_into(x, fp.w1->value, fp.b1->value, h1);
      for (double& v : h1) v = v > 0.0 ? v : 0.0;
      linear_into(h1, fp.w2->value, fp.b2->value, tmp);
      for (int j = 0; j < H; ++j) tmp[j] += x[j];
      layer_norm_plain(tmp, fp.ln_g->value, fp.ln_b->value);
      x = tmp;
    }
  }
  linear_into(x, params_.get("dec.out.w")->value, params_.get("dec.out.b")->value,
              log_probs);
  double mx = *std::max_element(log_probs.begin(), log_probs.end());
  double denom = 0.0;
  for (double v : log_probs) denom += std::exp(v - mx);
  double log_denom = std::log(denom) + mx;
  for (double& v : log_probs) v -= log_denom;
  return log_probs;
}

std::vector<ScoredSequence> Seq2SeqModel::topk(const std::vector<int>& src_ids,
                                               int k) const {
  DecodeContext ctx;
  encode_plain(src_ids, ctx);
  int H = config_.hidden_size;
  const Tensor& tok = params_.get("dec.tok_emb")->value;
  const Tensor& pos = params_.get("dec.pos_emb")->value;

  // Runs one decode step for the beam's newest token and returns the next
  // token log-probs, updating the beam's caches in place.
  auto step_beam = [&](BeamState& beam, Vec& log_probs) {
    int step = static_cast<int>(beam.tokens.size()) - 1;
    int token = beam.tokens.back();
    Vec x(H), tmp, ctxv, q;
    for (int j = 0; j < H; ++j) x[j] = tok.at(token, j) + pos.at(step, j);
    for (int l = 0; l < config_.layers; ++l) {
      std::string p = "dec.layer" + std::to_string(l);
      AttnParams sp = fetch_attn(params_, p + ".self");
      linear_into(x, sp.wq->value, sp.bq->value, q);
      linear_into(x, sp.wk->value, sp.bk->value, tmp);
      beam.self_k[l].insert(beam.self_k[l].end(), tmp.begin(), tmp.end());
      linear_into(x, sp.wv->value, sp.bv->value, tmp);
      beam.self_v[l].insert(beam.self_v[l].end(), tmp.begin(), tmp.end());
      attend_plain(q, beam.self_k[l], beam.self_v[l], step + 1, config_.heads, H,
                   ctxv);
      linear_into(ctxv, sp.wo->value, sp.bo->value, tmp);
      for (int j = 0; j < H; ++j) tmp[j] += x[j];
      layer_norm_plain(tmp, sp.ln_g->value, sp.ln_b->value);
      x = tmp;

      AttnParams cp = fetch_attn(params_, p + ".cross");
      linear_into(x, cp.wq->value, cp.bq->value, q);
      attend_plain(q, ctx.cross_k[l], ctx.cross_v[l], ctx.src_len, config_.heads,
                   H, ctxv);
      linear_into(ctxv, cp.wo->value, cp.bo->value, tmp);
      for (int j = 0; j < H; ++j) tmp[j] += x[j];
      layer_norm_plain(tmp, cp.ln_g->value, cp.ln_b->value);
      x = tmp;

      FfnParams fp = fetch_ffn(params_, p + ".ffn");
      Vec h1;
      linear_into(x, fp.w1->value, fp.b1->value, h1);
      for (double& v : h1) v = v > 0.0 ? v : 0.0;
      linear_into(h1, fp.w2->value, fp.b2->value, tmp);
      for (int j = 0; j < H; ++j) tmp[j] += x[j];
      layer_norm_plain(tmp, fp.ln_g->value, fp.ln_b->value);
      x = tmp;
    }
    linear_into(x, params_.get("dec.out.w")->value,
                params_.get("dec.out.b")->value, log_probs);
    double mx = *std::max_element(log_probs.begin(), log_probs.end());
    double denom = 0.0;
    for (double v : log_probs) denom += std::exp(v - mx);
    double log_denom = std::log(denom) + mx;
    for (double& v : log_probs) v -= log_denom;
  };

  std::vector<BeamState> beams(1);
  beams[0].tokens = {config_.bos_id};
  beams[0].self_k.assign(config_.layers, {});
  beams[0].self_v.assign(config_.layers, {});

  std::vector<ScoredSequence> done;
  int width = std::max(k, 1);
  int cap = std::min(config_.max_decode_len, config_.max_positions - 1);
  for (int pos_i = 0; pos_i < cap && !beams.empty(); ++pos_i) {
    struct Cand {
      int beam;
      int token;
      double score;
    };
    std::vector<Cand> cands;
    std::vector<Vec> lp(beams.size());
    for (size_t b = 0; b < beams.size(); ++b) {
      step_beam(beams[b], lp[b]);
      // Top `width` tokens from this beam are enough: the global cut keeps
      // at most `width` candidates anyway.
      std::vector<int> order(lp[b].size());
      for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
      int take = std::min<int>(width, static_cast<int>(order.size()));
      std::partial_sort(order.begin(), order.begin() + take, order.end(),
                        [&](int a, int c) { return lp[b][a] > lp[b][c]; });
      for (int i = 0; i < take; ++i) {
        cands.push_back({static_cast<int>(b), order[i],
                         beams[b].log_prob + lp[b][order[i]]});
      }
    }
    std::stable_sort(cands.begin(), cands.end(),
                     [](const Cand& a, const Cand& b) { return a.score > b.score; });
    std::vector<BeamState> next;
    for (const Cand& c : cands) {
      if (static_cast<int>(next.size()) >= width) break;
      if (c.token == config_.eos_id) {
        ScoredSequence seq;
        seq.token_ids.assign(beams[c.beam].tokens.begin() + 1,
                             beams[c.beam].tokens.end());
        seq.log_prob = c.score;
        done.push_back(std::move(seq));
        continue;
      }
      BeamState nb = beams[c.beam];  // copies caches
      nb.tokens.push_back(c.token);
      nb.log_prob = c.score;
      next.push_back(std::move(nb));
    }
    beams = std::move(next);
    if (static_cast<int>(done.size()) >= width) break;
  }
  for (const BeamState& b : beams) {
    ScoredSequence seq;
    seq.token_ids.assign(b.tokens.begin() + 1, b.tokens.end());
    seq.log_prob = b.log_prob;
    done.push_back(std::move(seq));
  }
  std::stable_sort(done.begin(), done.end(),
                   [](const ScoredSequence& a, const ScoredSequence& b) {
                     return a.log_prob > b.log_prob;
                   });
  if (static_cast<int>(done.size()) > k) done.resize(k);
  return done;
}

}  // namespace treecls
