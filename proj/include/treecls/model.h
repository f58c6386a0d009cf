#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "treecls/masks.h"
#include "treecls/structure.h"
#include "treecls/tensor.h"

namespace treecls {

// Token <-> id lookup. Out-of-vocabulary tokens map to <UNK> and are counted.
class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> tokens);

  int lookup(const std::string& token) const;
  int id_of(const std::string& token) const;  // throws on missing
  const std::string& token_of(int id) const { return tokens_[id]; }
  int size() const { return static_cast<int>(tokens_.size()); }
  int unk_id() const { return unk_id_; }
  int64_t oov_count() const { return oov_count_; }
  std::vector<int> ids_for(const std::vector<std::string>& tokens) const;

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, int> index_;
  int unk_id_ = 0;
  mutable int64_t oov_count_ = 0;
};

// Owns named parameters in creation order.
class ParamSet {
 public:
  Parameter* create(const std::string& name, const std::vector<int>& shape,
                    Precision precision);
  Parameter* get(const std::string& name);
  std::vector<Parameter*> all();
  std::vector<const Parameter*> all() const;
  void zero_grads();
  int64_t count() const;
  void copy_values_from(const ParamSet& other);

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
  std::map<std::string, Parameter*> index_;
};

// Clipped relative-position labels used when no structure labels apply:
// distance clipped to +-kPositionClip, 2*kPositionClip+1 labels.
inline constexpr int kPositionClip = 8;
inline constexpr int kPositionLabelCount = 2 * kPositionClip + 1;

struct EncoderConfig {
  int layers = 2;
  int hidden_size = 64;
  int filter_size = 256;
  int heads = 4;
  double dropout = 0.1;
  int label_vocab_size = kRelationLabelCount;
  MaskMode mode = MaskMode::kNone;
  bool use_cross_links = false;
  int vocab_size = 0;
  int max_positions = 128;
  bool value_side_labels = false;
  // Test support: ignore labels and masks entirely and run plain softmax
  // attention (the vanilla-transformer reference for identity checks).
  bool plain_attention = false;
  Precision precision = Precision::kDouble;

  // Structure labels replace the positional ones in soft/both modes; the
  // other modes keep absolute positions plus clipped relative positions.
  bool structure_labels() const {
    return mode == MaskMode::kSoft || mode == MaskMode::kBoth;
  }
  bool absolute_positions() const {
    return !structure_labels() && !plain_attention;
  }
  int attention_label_count() const {
    return structure_labels() ? label_vocab_size : kPositionLabelCount;
  }
};

// Everything the encoder needs for one instance, resolved against a
// vocabulary and a mask mode.
struct EncoderInput {
  std::vector<int> token_ids;
  std::vector<int> attn_labels;  // n*n
  std::vector<uint8_t> hard;     // n*n, or empty when unmasked
};

EncoderInput make_encoder_input(const AnnotatedInstance& inst,
                                const Vocabulary& vocab,
                                const EncoderConfig& config);

// score(i,j) = q_i . (k_j + a_{label(i,j)}) / sqrt(head_dim), per head with
// key-side label embeddings shared across heads; empty labels give vanilla
// scaled dot-product attention; hard mask applies inside the softmax.
Var relative_attention(Tape& t, Var queries, Var keys, Var values,
                       const std::vector<int>& labels, Var label_table_k,
                       Var label_table_v, bool use_value_labels,
                       const std::vector<uint8_t>& hard, int heads);

class EncoderClassifier {
 public:
  EncoderClassifier(const EncoderConfig& config, uint64_t init_seed);

  // Returns [1,2] class logits from the CLS position.
  Var forward(Tape& t, const EncoderInput& input, Rng* dropout_rng,
              bool training) const;

  // Encoder stack output [n, hidden] before the classifier head; the
  // hard-mask locality probes inspect per-position rows.
  Var forward_hidden(Tape& t, const EncoderInput& input, Rng* dropout_rng,
                     bool training) const;

  const EncoderConfig& config() const { return config_; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }
  int64_t param_count() const { return params_.count(); }

 private:
  EncoderConfig config_;
  mutable ParamSet params_;
};

struct LstmConfig {
  int layers = 2;
  int hidden_size = 64;
  double dropout = 0.4;
  int dense_hidden = 64;  // first of the two final dense layers
  int vocab_size = 0;
  Precision precision = Precision::kDouble;
};

class LstmClassifier {
 public:
  LstmClassifier(const LstmConfig& config, uint64_t init_seed);

  // Bidirectional recurrence over question <SEP> query token ids; final
  // states feed two dense layers.
  Var forward(Tape& t, const std::vector<int>& token_ids, Rng* dropout_rng,
              bool training) const;

  const LstmConfig& config() const { return config_; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }

 private:
  LstmConfig config_;
  mutable ParamSet params_;
};

struct Seq2SeqConfig {
  int layers = 2;  // encoder and decoder depth
  int hidden_size = 64;
  int filter_size = 256;
  int heads = 4;
  double dropout = 0.1;
  int vocab_size = 0;
  int max_positions = 128;
  int max_decode_len = 64;
  int bos_id = 3;  // the default vocabulary layout puts <BOS>/<EOS> here
  int eos_id = 4;
  Precision precision = Precision::kDouble;
};

struct ScoredSequence {
  std::vector<int> token_ids;  // without BOS/EOS
  double log_prob = 0.0;
};

class Seq2SeqModel {
 public:
  Seq2SeqModel(const Seq2SeqConfig& config, uint64_t init_seed);

  // Teacher-forced token-averaged cross entropy; target excludes BOS/EOS,
  // which are added internally.
  Var loss(Tape& t, const std::vector<int>& src_ids,
           const std::vector<int>& tgt_ids, Rng* dropout_rng,
           bool training) const;

  // Beam search of width k; returns up to k distinct sequences ordered by
  // total log-probability (non-increasing).
  std::vector<ScoredSequence> topk(const std::vector<int>& src_ids, int k) const;

  // Next-token log-probabilities after feeding prefix through the cached
  // decoder; exposed so tests can check the cache against the tape path.
  std::vector<double> next_token_log_probs(const std::vector<int>& src_ids,
                                           const std::vector<int>& prefix_with_bos) const;

  const Seq2SeqConfig& config() const { return config_; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }

 private:
  struct DecodeContext;
  void encode_plain(const std::vector<int>& src_ids, DecodeContext& ctx) const;

  Seq2SeqConfig config_;
  mutable ParamSet params_;
};

}  // namespace treecls
