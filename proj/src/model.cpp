#include "tlid/model.hpp"

#include <cmath>
#include <sstream>

#include "tlid/error.hpp"
#include "tlid/random.hpp"

namespace tlid {

ModelConfig ModelConfig::titanet(int blocks, int repeats, int channels, int num_classes) {
  ModelConfig cfg;
  cfg.num_blocks = blocks;
  cfg.repeats = repeats;
  cfg.channels = channels;
  cfg.num_classes = num_classes;
  cfg.mega_kernel_sizes.clear();
  for (int b = 0; b < blocks; ++b) cfg.mega_kernel_sizes.push_back(7 + 4 * b);
  return cfg;
}

std::string ModelConfig::name() const {
  std::ostringstream os;
  os << "TitaNet-LID-" << num_blocks << 'x' << repeats << 'x' << channels;
  return os.str();
}

void ModelConfig::validate() const {
  auto positive = [](int v, const char* field) {
    if (v <= 0) throw ConfigError(std::string("model config: ") + field + " must be positive");
  };
  positive(num_blocks, "num_blocks");
  positive(repeats, "repeats");
  positive(channels, "channels");
  positive(epilogue_channels, "epilogue_channels");
  positive(se_reduction, "se_reduction");
  positive(hidden_dim, "hidden_dim");
  positive(n_mels, "n_mels");
  if (prologue_channels < 0) throw ConfigError("model config: prologue_channels must be >= 0");
  if (num_classes < 2) throw ConfigError("model config: num_classes must be >= 2");
  if (static_cast<int>(mega_kernel_sizes.size()) != num_blocks) {
    throw ConfigError("model config: mega_kernel_sizes must have num_blocks entries");
  }
  for (int k : mega_kernel_sizes) {
    if (k <= 0 || k % 2 == 0) throw ConfigError("model config: mega_kernel_sizes must be odd and positive");
  }
  for (int k : {prologue_kernel, epilogue_kernel}) {
    if (k <= 0 || k % 2 == 0) throw ConfigError("model config: prologue/epilogue kernels must be odd and positive");
  }
  if (dropout_p < 0.0 || dropout_p >= 1.0 || decoder_dropout_p < 0.0 || decoder_dropout_p >= 1.0) {
    throw ConfigError("model config: dropout must be in [0, 1)");
  }
}

Tensor squeeze_excite(const Tensor& x, const SequenceMask& mask, const Tensor& fc1_w, const Tensor& fc1_b,
                      const Tensor& fc2_w, const Tensor& fc2_b) {
  Tensor s = relu(linear(global_avg_pool_time(x, mask), fc1_w, fc1_b));
  s = sigmoid(linear(s, fc2_w, fc2_b));
  return channel_scale(x, s);
}

std::uint64_t param_count_formula(const ModelConfig& cfg) {
  cfg.validate();
  using U = std::uint64_t;
  const U F = cfg.n_mels, P = cfg.prologue_out(), C = cfg.channels, E = cfg.epilogue_channels;
  const U S = cfg.se_bottleneck(), H = cfg.hidden_dim, K = cfg.num_classes, R = cfg.repeats;
  auto separable = [](U cin, U cout, U k) { return cin * k + cin * cout; };
  auto bn = [](U c) { return 2 * c; };

  U total = separable(F, P, cfg.prologue_kernel) + bn(P);
  for (int b = 0; b < cfg.num_blocks; ++b) {
    const U cin = b == 0 ? P : C;
    const U k = cfg.mega_kernel_sizes[b];
    total += separable(cin, C, k) + bn(C);
    total += (R - 1) * (separable(C, C, k) + bn(C));
    total += C * S + S + S * C + C;  // SE bottleneck
    total += cin * C + bn(C);        // residual projection
  }
  total += separable(C, E, cfg.epilogue_kernel) + bn(E);
  total += 2 * E * H + H + H * K + K;
  return total;
}

FlopCount forward_flops(const ModelConfig& cfg, std::size_t frames) {
  cfg.validate();
  using U = std::uint64_t;
  const U T = frames;
  const U F = cfg.n_mels, P = cfg.prologue_out(), C = cfg.channels, E = cfg.epilogue_channels;
  const U S = cfg.se_bottleneck(), H = cfg.hidden_dim, K = cfg.num_classes;
  FlopCount f;
  // separable conv: 2 flops per MAC; BN 2/elem; ReLU 1/elem
  auto basic = [&](U cin, U cout, U k) { f.time_proportional += T * (2 * cin * k + 2 * cin * cout + 3 * cout); };
  basic(F, P, cfg.prologue_kernel);
  for (int b = 0; b < cfg.num_blocks; ++b) {
    const U cin = b == 0 ? P : C;
    for (int r = 0; r < cfg.repeats; ++r) basic(r == 0 ? cin : C, C, cfg.mega_kernel_sizes[b]);
    f.time_proportional += T * C;          // SE average pool
    f.time_proportional += T * C;          // SE channel scaling
    f.time_proportional += T * (2 * cin * C + 2 * C);  // residual projection + BN
    f.time_proportional += T * 2 * C;      // residual add + ReLU
    f.fixed += 2 * C * S + S + 2 * S * C + 4 * C;  // SE bottleneck, ReLU, sigmoid
  }
  basic(C, E, cfg.epilogue_kernel);
  f.time_proportional += T * 3 * E;  // mean and variance accumulation
  f.fixed += 2 * E + 2 * 2 * E * H + 2 * H + 2 * H * K;
  return f;
}

FeatureBatch make_batch(std::span<const FeatureMatrix* const> items) {
  if (items.empty()) throw DimensionError("make_batch: empty batch");
  const std::size_t M = items[0]->n_mels();
  std::vector<std::size_t> lengths;
  for (const auto* f : items) {
    if (f->n_mels() != M) throw DimensionError("make_batch: inconsistent mel count");
    lengths.push_back(f->num_frames);
  }
  auto mask = SequenceMask::from_lengths(lengths);
  const std::size_t T = mask.max_len;
  std::vector<double> data(items.size() * M * T, 0.0);
  for (std::size_t n = 0; n < items.size(); ++n) {
    auto src = items[n]->mels.data();
    const std::size_t L = items[n]->num_frames;
    for (std::size_t m = 0; m < M; ++m) {
      std::copy_n(src.data() + m * L, L, data.data() + (n * M + m) * T);
    }
  }
  return {Tensor({items.size(), M, T}, std::move(data)), std::move(mask)};
}

FeatureBatch make_batch(const std::vector<FeatureMatrix>& items) {
  std::vector<const FeatureMatrix*> ptrs;
  for (const auto& f : items) ptrs.push_back(&f);
  return make_batch(std::span<const FeatureMatrix* const>(ptrs));
}

Model::Model(const Model& other)
    : cfg_(other.cfg_),
      buffers_(other.buffers_),
      prologue_(other.prologue_),
      mega_(other.mega_),
      epilogue_(other.epilogue_),
      fc1_w_(other.fc1_w_),
      fc1_b_(other.fc1_b_),
      fc2_w_(other.fc2_w_),
      fc2_b_(other.fc2_b_),
      seed_(other.seed_),
      frozen_(other.frozen_),
      encoder_frozen_(other.encoder_frozen_) {
  params_.reserve(other.params_.size());
  for (const auto& p : other.params_) params_.push_back({p.name, p.tensor.clone()});
}

Model& Model::operator=(const Model& other) {
  if (this != &other) {
    Model copy(other);
    *this = std::move(copy);
  }
  return *this;
}

std::size_t Model::add_param(std::string name, Shape shape) {
  params_.push_back({std::move(name), Tensor::zeros(std::move(shape), true)});
  return params_.size() - 1;
}

Model::BnRef Model::add_bn(const std::string& prefix, std::size_t channels) {
  BnRef ref{};
  ref.gamma = add_param(prefix + ".weight", {channels});
  ref.beta = add_param(prefix + ".bias", {channels});
  ref.stats = buffers_.size();
  buffers_.push_back({prefix + ".running_mean", std::vector<double>(channels, 0.0)});
  buffers_.push_back({prefix + ".running_var", std::vector<double>(channels, 1.0)});
  return ref;
}

Model::BasicRef Model::add_basic(const std::string& prefix, std::size_t cin, std::size_t cout, std::size_t kernel) {
  BasicRef ref{};
  ref.dw = add_param(prefix + ".conv.depthwise.weight", {cin, kernel});
  ref.pw = add_param(prefix + ".conv.pointwise.weight", {cout, cin});
  ref.bn = add_bn(prefix + ".bn", cout);
  return ref;
}

void Model::init_param(std::size_t index, std::uint64_t seed) {
  auto& p = params_[index];
  auto data = p.tensor.mutable_data();
  const auto& name = p.name;
  auto ends_with = [&](const char* suffix) {
    const std::string s(suffix);
    return name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
  };
  const bool is_bn = name.find(".bn.") != std::string::npos;
  if (is_bn) {
    std::fill(data.begin(), data.end(), ends_with(".weight") ? 1.0 : 0.0);
    return;
  }
  if (ends_with(".bias")) {
    std::fill(data.begin(), data.end(), 0.0);
    return;
  }
  // Weights are [out, fan_in] for pointwise/linear and [C, K] for depthwise.
  const double fan_in = static_cast<double>(p.tensor.dim(1));
  const double bound = std::sqrt(6.0 / fan_in);
  Rng rng(derive_seed(seed, index));
  for (auto& v : data) v = rng.uniform(-bound, bound);
}

Model Model::build(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Model m;
  m.cfg_ = cfg;
  m.seed_ = seed;
  const std::size_t F = cfg.n_mels, P = cfg.prologue_out(), C = cfg.channels, E = cfg.epilogue_channels;
  const std::size_t S = cfg.se_bottleneck(), H = cfg.hidden_dim, K = cfg.num_classes;

  m.prologue_ = m.add_basic("encoder.prologue", F, P, cfg.prologue_kernel);
  for (int b = 0; b < cfg.num_blocks; ++b) {
    const std::string prefix = "encoder.blocks." + std::to_string(b);
    const std::size_t cin = b == 0 ? P : C;
    const auto k = static_cast<std::size_t>(cfg.mega_kernel_sizes[b]);
    MegaRef mega;
    for (int r = 0; r < cfg.repeats; ++r) {
      mega.subs.push_back(m.add_basic(prefix + ".sub." + std::to_string(r), r == 0 ? cin : C, C, k));
    }
    mega.se_fc1_w = m.add_param(prefix + ".se.fc1.weight", {S, C});
    mega.se_fc1_b = m.add_param(prefix + ".se.fc1.bias", {S});
    mega.se_fc2_w = m.add_param(prefix + ".se.fc2.weight", {C, S});
    mega.se_fc2_b = m.add_param(prefix + ".se.fc2.bias", {C});
    mega.res_pw = m.add_param(prefix + ".residual.pointwise.weight", {C, cin});
    mega.res_bn = m.add_bn(prefix + ".residual.bn", C);
    m.mega_.push_back(std::move(mega));
  }
  m.epilogue_ = m.add_basic("encoder.epilogue", C, E, cfg.epilogue_kernel);
  m.fc1_w_ = m.add_param("decoder.fc1.weight", {H, 2 * E});
  m.fc1_b_ = m.add_param("decoder.fc1.bias", {H});
  m.fc2_w_ = m.add_param("decoder.fc2.weight", {K, H});
  m.fc2_b_ = m.add_param("decoder.fc2.bias", {K});

  for (std::size_t i = 0; i < m.params_.size(); ++i) m.init_param(i, seed);
  return m;
}

const Tensor& Model::parameter(const std::string& name) const {
  for (const auto& p : params_) {
    if (p.name == name) return p.tensor;
  }
  throw ConfigError("no parameter named '" + name + "'");
}

std::uint64_t Model::count_params() const {
  std::uint64_t n = 0;
  for (const auto& p : params_) n += p.tensor.size();
  return n;
}

bool Model::is_decoder_parameter(const std::string& name) { return name.rfind("decoder.", 0) == 0; }

void Model::replace_head(int new_num_classes, std::uint64_t seed) {
  if (new_num_classes < 2) throw ConfigError("replace_head: need at least 2 classes");
  const auto K = static_cast<std::size_t>(new_num_classes);
  const auto H = static_cast<std::size_t>(cfg_.hidden_dim);
  const bool w_grad = !is_frozen(params_[fc2_w_].name);
  params_[fc2_w_].tensor = Tensor::zeros({K, H}, w_grad);
  params_[fc2_b_].tensor = Tensor::zeros({K}, w_grad);
  cfg_.num_classes = new_num_classes;
  init_param(fc2_w_, seed);
  init_param(fc2_b_, seed);
}

void Model::freeze_encoder() {
  for (auto& p : params_) {
    if (!is_decoder_parameter(p.name)) {
      frozen_.insert(p.name);
      p.tensor.set_requires_grad(false);
      p.tensor.zero_grad();
    }
  }
  encoder_frozen_ = true;
}

void Model::set_dropout(double block_p, double decoder_p) {
  ModelConfig next = cfg_;
  next.dropout_p = block_p;
  next.decoder_dropout_p = decoder_p;
  next.validate();
  cfg_ = next;
}

Tensor Model::forward(const Tensor& features, const SequenceMask& mask, Mode mode, std::uint64_t seed) {
  return run(features, mask, mode, seed);
}

Tensor Model::infer(const Tensor& features, const SequenceMask& mask) const {
  NoGradGuard no_grad;
  return run(features, mask, Mode::Eval, 0);
}

Tensor Model::run_bn(const Tensor& x, const BnRef& bn, Mode mode, const SequenceMask& mask) const {
  // Eval mode only reads the running statistics, so concurrent infer() is safe.
  return batchnorm1d(x, params_[bn.gamma].tensor, params_[bn.beta].tensor, buffers_[bn.stats].values,
                     buffers_[bn.stats + 1].values, mode, mask);
}

Tensor Model::run_basic(const Tensor& x, const BasicRef& b, Mode mode, const SequenceMask& mask) const {
  Tensor h = conv1d_depthwise(x, params_[b.dw].tensor);
  h = conv1d_pointwise(h, params_[b.pw].tensor);
  return relu(run_bn(h, b.bn, mode, mask));
}

Tensor Model::run(const Tensor& features, const SequenceMask& mask, Mode mode, std::uint64_t seed) const {
  if (features.rank() != 3 || features.dim(1) != static_cast<std::size_t>(cfg_.n_mels)) {
    throw DimensionError("model forward: expected [N," + std::to_string(cfg_.n_mels) + ",T] features, got " +
                         shape_str(features.shape()));
  }
  mask.validate();
  if (mask.batch != features.dim(0) || mask.max_len != features.dim(2)) {
    throw DimensionError("model forward: mask does not match features");
  }
  const Mode enc_mode = encoder_frozen_ ? Mode::Eval : mode;
  std::uint64_t dropout_stream = 0;
  auto next_seed = [&] { return derive_seed(seed, dropout_stream++); };

  Tensor x = mask_time(features, mask);
  x = run_basic(x, prologue_, enc_mode, mask);
  for (const auto& mega : mega_) {
    Tensor h = x;
    for (const auto& sub : mega.subs) {
      h = dropout(run_basic(h, sub, enc_mode, mask), cfg_.dropout_p, enc_mode, next_seed());
    }
    h = squeeze_excite(h, mask, params_[mega.se_fc1_w].tensor, params_[mega.se_fc1_b].tensor,
                       params_[mega.se_fc2_w].tensor, params_[mega.se_fc2_b].tensor);
    Tensor res = run_bn(conv1d_pointwise(x, params_[mega.res_pw].tensor), mega.res_bn, enc_mode, mask);
    x = relu(add(h, res));
  }
  x = conv1d_pointwise(conv1d_depthwise(x, params_[epilogue_.dw].tensor), params_[epilogue_.pw].tensor);
  Tensor z = batchnorm_relu_stats_pool(x, params_[epilogue_.bn.gamma].tensor, params_[epilogue_.bn.beta].tensor,
                                       buffers_[epilogue_.bn.stats].values, buffers_[epilogue_.bn.stats + 1].values,
                                       enc_mode, mask);
  z = relu(linear(z, params_[fc1_w_].tensor, params_[fc1_b_].tensor));
  z = dropout(z, cfg_.decoder_dropout_p, mode, next_seed());
  return linear(z, params_[fc2_w_].tensor, params_[fc2_b_].tensor);
}

}  // namespace tlid
