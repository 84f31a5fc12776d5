#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "capgen/batch.hpp"
#include "capgen/nn.hpp"
#include "capgen/tensor.hpp"
#include "capgen/tokens.hpp"

namespace capgen {

enum class Architecture { inject, merge };

std::string to_string(Architecture arch);
Architecture parse_architecture(const std::string& text);
std::string to_string(Precision precision);
Precision parse_precision(const std::string& text);

// Embedding, LSTM state and projected image all share `layer_size`.
struct ModelConfig {
  Architecture architecture = Architecture::merge;
  std::size_t layer_size = 128;
  std::size_t vocab_size = 0;
  std::size_t image_size = 4096;
  int min_token_frequency = 3;
  Precision precision = Precision::f32;
  std::uint64_t seed = 0;

  // Throws ConfigError on sizes the model cannot be built with.
  void validate() const;

  // Flat "key=value" lines; used as the checkpoint config record.
  std::string serialize() const;
  static ModelConfig parse(const std::string& record);

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct ParamCounts {
  std::uint64_t embedding = 0;
  std::uint64_t image_projection = 0;
  std::uint64_t lstm = 0;
  std::uint64_t output = 0;
  std::uint64_t total = 0;
};

// Closed-form weight counts; matches CaptionModel's actual parameter sizes.
ParamCounts count_params(const ModelConfig& config);

// The inject and merge caption generators.
//
//   inject: [embed(w_t), proj(image)] -> LSTM -> s_t -> dense -> softmax
//   merge:  embed(w_t) -> LSTM -> [s_t, proj(image)] -> dense -> softmax
//
// Parameters are never mutated by forward computations; gradients are
// collected on the tape passed to the training entry points.
template <typename Real>
class CaptionModel {
 public:
  using Var = nn::Var<Real>;
  using State = nn::LstmState<Real>;

  // All-zero parameters with the shapes implied by `config`.
  explicit CaptionModel(const ModelConfig& config);

  const ModelConfig& config() const noexcept { return config_; }
  std::size_t lstm_input_size() const { return lstm_.input_size(); }
  std::size_t output_input_size() const { return out_w_.value.extent(0); }

  std::vector<nn::Parameter<Real>*> parameters();
  std::vector<const nn::Parameter<Real>*> parameters() const;

  // Next-token logits (v) after reading `prefix`, which must start with the
  // start token.
  Tensor<Real> forward(std::span<const float> image, std::span<const TokenId> prefix) const;

  // Batched form: `images` is (B, i), `prefixes` is B rows of equal length T
  // stored row-major. Returns (B, v).
  Tensor<Real> forward(std::span<const float> images, std::span<const TokenId> prefixes, std::size_t batch) const;

  // LSTM hidden state (s) after reading `prefix`.
  Tensor<Real> hidden_state(std::span<const float> image, std::span<const TokenId> prefix) const;

  // Teacher-forced sum cross-entropy of a start...end caption.
  double caption_loss(std::span<const float> image, std::span<const TokenId> caption) const;
  Var caption_loss(std::span<const float> image, std::span<const TokenId> caption, nn::TapePtr<Real> tape) const;

  // Sum cross-entropy over every caption of the batch; padding is masked.
  Var batch_loss(const Minibatch& batch, nn::TapePtr<Real> tape) const;

  // Incremental pieces used by the decoders.
  Var project_image(std::span<const float> images, std::size_t batch, nn::TapePtr<Real> tape) const;
  State initial_state(std::size_t batch) const { return State::zeros(batch, config_.layer_size); }
  State step(const Var& projected, const State& state, std::span<const TokenId> tokens, nn::TapePtr<Real> tape) const;
  Var logits(const Var& projected, const State& state, nn::TapePtr<Real> tape) const;

 private:
  void check_prefix(std::span<const TokenId> prefix) const;

  ModelConfig config_;
  nn::Parameter<Real> embedding_;
  nn::Parameter<Real> image_w_;
  nn::Parameter<Real> image_b_;
  nn::LstmCellParams<Real> lstm_;
  nn::Parameter<Real> out_w_;
  nn::Parameter<Real> out_b_;
};

// Xavier-uniform weights, zero biases; same config and seed give identical
// models.
template <typename Real>
CaptionModel<Real> build_model(const ModelConfig& config, std::uint64_t seed);

// Checkpoint layout (all integers little-endian):
//   "CAPRNN01"
//   u32 length, config record (UTF-8)
//   u32 tensor count, then per tensor:
//     u32 name length, name, u32 rank, u32 extents[rank], f32 values[]
template <typename Real>
void save_checkpoint(const std::filesystem::path& path, const CaptionModel<Real>& model);

template <typename Real>
CaptionModel<Real> load_checkpoint(const std::filesystem::path& path);

ModelConfig read_checkpoint_config(const std::filesystem::path& path);

}  // namespace capgen
