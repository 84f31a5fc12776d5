#include "capgen/captioner.hpp"

#include <fstream>
#include <map>
#include <sstream>

#include "binary_io.hpp"

namespace capgen {
namespace {

constexpr char kCheckpointMagic[] = "CAPRNN01";

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

template <typename Real>
Tensor<Real> to_tensor(std::span<const float> values, Shape shape) {
  if (values.size() != shape_size(shape)) {
    throw DimensionError("image features of size " + std::to_string(values.size()) + " do not fit " +
                         shape_to_string(shape));
  }
  return Tensor<Real>(std::move(shape), std::vector<Real>(values.begin(), values.end()));
}

std::uint64_t parse_u64(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const unsigned long long parsed = std::stoull(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return parsed;
  } catch (const std::exception&) {
    throw FormatError("config record: bad integer for " + key + ": '" + value + "'");
  }
}

}  // namespace

std::string to_string(Architecture arch) { return arch == Architecture::inject ? "inject" : "merge"; }

Architecture parse_architecture(const std::string& text) {
  if (text == "inject") return Architecture::inject;
  if (text == "merge") return Architecture::merge;
  throw ConfigError("unknown architecture '" + text + "' (expected inject or merge)");
}

std::string to_string(Precision precision) { return precision == Precision::f32 ? "32" : "64"; }

Precision parse_precision(const std::string& text) {
  if (text == "32") return Precision::f32;
  if (text == "64") return Precision::f64;
  throw ConfigError("unknown precision '" + text + "' (expected 32 or 64)");
}

void ModelConfig::validate() const {
  if (layer_size == 0) throw ConfigError("layer size must be positive");
  if (vocab_size < 4) throw ConfigError("vocabulary size must be at least 4, got " + std::to_string(vocab_size));
  if (image_size == 0) throw ConfigError("image size must be positive");
  if (min_token_frequency < 1) throw ConfigError("minimum token frequency must be >= 1");
}

std::string ModelConfig::serialize() const {
  std::ostringstream out;
  out << "architecture=" << to_string(architecture) << '\n'
      << "layer_size=" << layer_size << '\n'
      << "vocab_size=" << vocab_size << '\n'
      << "image_size=" << image_size << '\n'
      << "min_token_frequency=" << min_token_frequency << '\n'
      << "precision=" << to_string(precision) << '\n'
      << "seed=" << seed << '\n';
  return out.str();
}

ModelConfig ModelConfig::parse(const std::string& record) {
  std::map<std::string, std::string> fields;
  std::istringstream in(record);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("config record: malformed line '" + line + "'");
    fields[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto take = [&](const std::string& key) {
    auto it = fields.find(key);
    if (it == fields.end()) throw FormatError("config record: missing " + key);
    std::string value = it->second;
    fields.erase(it);
    return value;
  };
  ModelConfig config;
  try {
    config.architecture = parse_architecture(take("architecture"));
    config.precision = parse_precision(take("precision"));
  } catch (const ConfigError& e) {
    throw FormatError(std::string("config record: ") + e.what());
  }
  config.layer_size = parse_u64("layer_size", take("layer_size"));
  config.vocab_size = parse_u64("vocab_size", take("vocab_size"));
  config.image_size = parse_u64("image_size", take("image_size"));
  config.min_token_frequency = static_cast<int>(parse_u64("min_token_frequency", take("min_token_frequency")));
  config.seed = parse_u64("seed", take("seed"));
  if (!fields.empty()) throw FormatError("config record: unknown key " + fields.begin()->first);
  return config;
}

ParamCounts count_params(const ModelConfig& config) {
  const std::uint64_t x = config.layer_size;
  const std::uint64_t v = config.vocab_size;
  const std::uint64_t i = config.image_size;
  const bool inject = config.architecture == Architecture::inject;
  ParamCounts c;
  c.embedding = v * x;
  c.image_projection = (i + 1) * x;
  const std::uint64_t lstm_input = inject ? 2 * x : x;
  c.lstm = 4 * (lstm_input * x + x * x + x);
  c.output = ((inject ? x : 2 * x) + 1) * v;
  c.total = c.embedding + c.image_projection + c.lstm + c.output;
  return c;
}

template <typename Real>
CaptionModel<Real>::CaptionModel(const ModelConfig& config) : config_(config) {
  config_.validate();
  const std::size_t x = config_.layer_size;
  const std::size_t v = config_.vocab_size;
  const bool inject = config_.architecture == Architecture::inject;
  embedding_ = nn::Parameter<Real>("embedding", Tensor<Real>({v, x}));
  image_w_ = nn::Parameter<Real>("image_proj.W", Tensor<Real>({config_.image_size, x}));
  image_b_ = nn::Parameter<Real>("image_proj.b", Tensor<Real>({x}));
  lstm_ = nn::LstmCellParams<Real>::zeros(inject ? 2 * x : x, x, "lstm");
  out_w_ = nn::Parameter<Real>("output.W", Tensor<Real>({inject ? x : 2 * x, v}));
  out_b_ = nn::Parameter<Real>("output.b", Tensor<Real>({v}));
}

template <typename Real>
std::vector<nn::Parameter<Real>*> CaptionModel<Real>::parameters() {
  std::vector<nn::Parameter<Real>*> out{&embedding_, &image_w_, &image_b_};
  for (auto* p : lstm_.parameters()) out.push_back(p);
  out.push_back(&out_w_);
  out.push_back(&out_b_);
  return out;
}

template <typename Real>
std::vector<const nn::Parameter<Real>*> CaptionModel<Real>::parameters() const {
  std::vector<const nn::Parameter<Real>*> out{&embedding_, &image_w_, &image_b_};
  for (const auto* p : lstm_.parameters()) out.push_back(p);
  out.push_back(&out_w_);
  out.push_back(&out_b_);
  return out;
}

template <typename Real>
void CaptionModel<Real>::check_prefix(std::span<const TokenId> prefix) const {
  if (prefix.empty()) throw UsageError("prefix must contain at least the start token");
  if (prefix.front() != kStartToken) throw UsageError("prefix must begin with the start token");
}

template <typename Real>
auto CaptionModel<Real>::project_image(std::span<const float> images, std::size_t batch, nn::TapePtr<Real> tape) const
    -> Var {
  auto x = nn::constant(to_tensor<Real>(images, {batch, config_.image_size}));
  return nn::dense(x, image_w_, image_b_, tape);
}

template <typename Real>
auto CaptionModel<Real>::step(const Var& projected, const State& state, std::span<const TokenId> tokens,
                              nn::TapePtr<Real> tape) const -> State {
  auto embedded = nn::embedding(tokens, embedding_, tape);
  if (config_.architecture == Architecture::inject) {
    return nn::lstm_step(nn::concat(embedded, projected, tape), state, lstm_, tape);
  }
  return nn::lstm_step(embedded, state, lstm_, tape);
}

template <typename Real>
auto CaptionModel<Real>::logits(const Var& projected, const State& state, nn::TapePtr<Real> tape) const -> Var {
  if (config_.architecture == Architecture::merge) {
    return nn::dense(nn::concat(state.hidden, projected, tape), out_w_, out_b_, tape);
  }
  return nn::dense(state.hidden, out_w_, out_b_, tape);
}

template <typename Real>
Tensor<Real> CaptionModel<Real>::forward(std::span<const float> image, std::span<const TokenId> prefix) const {
  check_prefix(prefix);
  return forward(image, prefix, 1);
}

template <typename Real>
Tensor<Real> CaptionModel<Real>::forward(std::span<const float> images, std::span<const TokenId> prefixes,
                                         std::size_t batch) const {
  if (batch == 0 || prefixes.empty() || prefixes.size() % batch != 0) {
    throw UsageError("forward needs a non-empty prefix for each of the " + std::to_string(batch) + " rows");
  }
  const std::size_t length = prefixes.size() / batch;
  for (std::size_t r = 0; r < batch; ++r) check_prefix(prefixes.subspan(r * length, length));
  auto projected = project_image(images, batch, nullptr);
  State state = initial_state(batch);
  std::vector<TokenId> column(batch);
  for (std::size_t t = 0; t < length; ++t) {
    for (std::size_t r = 0; r < batch; ++r) column[r] = prefixes[r * length + t];
    state = step(projected, state, column, nullptr);
  }
  auto out = logits(projected, state, nullptr)->value;
  if (batch == 1) return Tensor<Real>({config_.vocab_size}, std::vector<Real>(out.storage()));
  return out;
}

template <typename Real>
Tensor<Real> CaptionModel<Real>::hidden_state(std::span<const float> image, std::span<const TokenId> prefix) const {
  check_prefix(prefix);
  auto projected = project_image(image, 1, nullptr);
  State state = initial_state(1);
  for (TokenId token : prefix) state = step(projected, state, std::span<const TokenId>(&token, 1), nullptr);
  return Tensor<Real>({config_.layer_size}, std::vector<Real>(state.hidden->value.storage()));
}

template <typename Real>
double CaptionModel<Real>::caption_loss(std::span<const float> image, std::span<const TokenId> caption) const {
  return static_cast<double>(caption_loss(image, caption, nullptr)->value[0]);
}

template <typename Real>
auto CaptionModel<Real>::caption_loss(std::span<const float> image, std::span<const TokenId> caption,
                                      nn::TapePtr<Real> tape) const -> Var {
  if (caption.size() < 2) throw UsageError("caption needs at least a start and an end token");
  check_prefix(caption);
  auto projected = project_image(image, 1, tape);
  State state = initial_state(1);
  std::vector<Var> terms;
  for (std::size_t t = 0; t + 1 < caption.size(); ++t) {
    state = step(projected, state, caption.subspan(t, 1), tape);
    terms.push_back(nn::softmax_xent(logits(projected, state, tape), caption.subspan(t + 1, 1), tape));
  }
  return nn::sum<Real>(terms, tape);
}

template <typename Real>
auto CaptionModel<Real>::batch_loss(const Minibatch& batch, nn::TapePtr<Real> tape) const -> Var {
  const std::size_t rows = batch.size;
  if (rows == 0 || batch.max_length < 2) throw UsageError("batch needs at least one caption of two tokens");
  if (batch.feature_dim != config_.image_size) {
    throw DimensionError("batch feature size " + std::to_string(batch.feature_dim) + " vs model image size " +
                         std::to_string(config_.image_size));
  }
  auto projected = project_image(batch.features, rows, tape);
  State state = initial_state(rows);
  std::vector<Var> terms;
  std::vector<TokenId> column(rows);
  std::vector<TokenId> targets(rows);
  for (std::size_t t = 0; t + 1 < batch.max_length; ++t) {
    for (std::size_t r = 0; r < rows; ++r) {
      column[r] = batch.tokens[r * batch.max_length + t];
      targets[r] = t + 1 < batch.lengths[r] ? batch.tokens[r * batch.max_length + t + 1] : nn::kIgnoreTarget;
    }
    state = step(projected, state, column, tape);
    terms.push_back(nn::softmax_xent(logits(projected, state, tape), targets, tape));
  }
  return nn::sum<Real>(terms, tape);
}

template <typename Real>
CaptionModel<Real> build_model(const ModelConfig& config, std::uint64_t seed) {
  CaptionModel<Real> model(config);
  std::uint64_t k = 0;
  for (auto* p : model.parameters()) {
    ++k;
    if (p->value.rank() != 2) continue;  // biases stay zero
    p->value = nn::xavier_init<Real>(p->value.shape(), splitmix64(seed * 0x100000001B3ULL + k));
  }
  return model;
}

template <typename Real>
void save_checkpoint(const std::filesystem::path& path, const CaptionModel<Real>& model) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FileError("cannot open checkpoint for writing: " + path.string());
  out.write(kCheckpointMagic, 8);
  const std::string record = model.config().serialize();
  binary::write_u32(out, static_cast<std::uint32_t>(record.size()));
  binary::write_bytes(out, record);
  const auto params = model.parameters();
  binary::write_u32(out, static_cast<std::uint32_t>(params.size()));
  for (const auto* p : params) {
    binary::write_u32(out, static_cast<std::uint32_t>(p->name.size()));
    binary::write_bytes(out, p->name);
    binary::write_u32(out, static_cast<std::uint32_t>(p->value.rank()));
    for (std::size_t e : p->value.shape()) binary::write_u32(out, static_cast<std::uint32_t>(e));
    for (Real value : p->value.values()) binary::write_f32(out, static_cast<float>(value));
  }
  if (!out) throw FileError("failed writing checkpoint " + path.string());
}

namespace {

ModelConfig read_header(std::istream& in, const std::filesystem::path& path) {
  const std::string magic = binary::read_bytes(in, 8, "checkpoint magic");
  if (magic != kCheckpointMagic) throw FormatError("not a checkpoint (bad magic): " + path.string());
  const std::uint32_t length = binary::read_u32(in, "config record length");
  return ModelConfig::parse(binary::read_bytes(in, length, "config record"));
}

}  // namespace

ModelConfig read_checkpoint_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FileError("cannot open checkpoint: " + path.string());
  return read_header(in, path);
}

template <typename Real>
CaptionModel<Real> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FileError("cannot open checkpoint: " + path.string());
  CaptionModel<Real> model(read_header(in, path));
  auto params = model.parameters();
  const std::uint32_t count = binary::read_u32(in, "tensor count");
  if (count != params.size()) {
    throw FormatError("checkpoint has " + std::to_string(count) + " tensors, model expects " +
                      std::to_string(params.size()));
  }
  for (auto* p : params) {
    const std::string name = binary::read_bytes(in, binary::read_u32(in, "tensor name length"), "tensor name");
    if (name != p->name) throw FormatError("checkpoint tensor '" + name + "' where '" + p->name + "' was expected");
    const std::uint32_t rank = binary::read_u32(in, "tensor rank");
    Shape shape(rank);
    for (auto& e : shape) e = binary::read_u32(in, "tensor extent");
    if (shape != p->value.shape()) {
      throw FormatError("checkpoint tensor '" + name + "' has shape " + shape_to_string(shape) + ", expected " +
                        shape_to_string(p->value.shape()));
    }
    for (auto& value : p->value.values()) value = static_cast<Real>(binary::read_f32(in, "tensor values"));
  }
  return model;
}

template class CaptionModel<float>;
template class CaptionModel<double>;
template CaptionModel<float> build_model<float>(const ModelConfig&, std::uint64_t);
template CaptionModel<double> build_model<double>(const ModelConfig&, std::uint64_t);
template void save_checkpoint<float>(const std::filesystem::path&, const CaptionModel<float>&);
template void save_checkpoint<double>(const std::filesystem::path&, const CaptionModel<double>&);
template CaptionModel<float> load_checkpoint<float>(const std::filesystem::path&);
template CaptionModel<double> load_checkpoint<double>(const std::filesystem::path&);

}  // namespace capgen
