// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "xcaps/capsule.hpp"
#include "xcaps/ratings.hpp"
#include "xcaps/rng.hpp"
#include "xcaps/tensor.hpp"

namespace xcaps::model {

// Architecture: conv + relu -> convolutional primary capsules (squash) ->
// fully-connected attribute capsules via dynamic routing -> affine malignancy
// head on the concatenated attribute vectors, plus a fully-connected decoder
// reconstructing the masked input. Defaults follow the reference sizes; the
// toy knobs exist so gradient checks and small experiments stay cheap.
struct XCapsConfig {
  std::size_t input_size = 32;
  std::size_t conv_filters = 256;
  std::size_t conv_kernel = 9;
  std::size_t primary_types = 32;
  std::size_t primary_dim = 8;
  std::size_t primary_kernel = 9;
  std::size_t primary_stride = 2;
  std::size_t attr_count = 6;
  std::size_t attr_dim = 16;
  std::size_t malignancy_classes = 5;
  std::size_t malignancy_outputs = 5;  // 1 when the head regresses the mean score
  caps::RoutingConfig routing = caps::RoutingConfig::sigmoid(3);
  std::vector<std::size_t> decoder_widths = {512, 1024};

  std::size_t conv_out() const { return input_size - conv_kernel + 1; }
  std::size_t primary_grid_side() const {
    return (conv_out() - primary_kernel) / primary_stride + 1;
  }
  std::size_t primary_grid() const { return primary_grid_side() * primary_grid_side(); }
  std::size_t child_count() const { return primary_types * primary_grid(); }
  std::size_t head_inputs() const { return attr_count * attr_dim; }
  std::size_t pixels() const { return input_size * input_size; }

  void validate() const {
    routing.validate();
    if (input_size < 2 || conv_filters < 1 || conv_kernel < 1 || primary_types < 1 ||
        primary_dim < 1 || primary_kernel < 1 || primary_stride < 1 || attr_count < 1 ||
        attr_dim < 1)
      throw std::invalid_argument("config: all sizes must be positive");
    if (conv_kernel > input_size)
      throw std::invalid_argument("config: conv kernel exceeds input size");
    if (primary_kernel > conv_out())
      throw std::invalid_argument("config: primary capsule kernel exceeds conv output");
    if (malignancy_classes < 2) throw std::invalid_argument("config: need at least 2 classes");
    if (malignancy_outputs != malignancy_classes && malignancy_outputs != 1)
      throw std::invalid_argument("config: head outputs must be the class count or 1");
    if (decoder_widths.empty()) throw std::invalid_argument("config: decoder needs hidden layers");
  }
};

inline void to_json(nlohmann::json& j, const XCapsConfig& c) {
  j = nlohmann::json{
      {"input_size", c.input_size},
      {"conv_filters", c.conv_filters},
      {"conv_kernel", c.conv_kernel},
      {"primary_types", c.primary_types},
      {"primary_dim", c.primary_dim},
      {"primary_kernel", c.primary_kernel},
      {"primary_stride", c.primary_stride},
      {"attr_count", c.attr_count},
      {"attr_dim", c.attr_dim},
      {"malignancy_classes", c.malignancy_classes},
      {"malignancy_outputs", c.malignancy_outputs},
      {"routing_mode", c.routing.mode == caps::RoutingMode::kSigmoid ? "sigmoid" : "softmax"},
      {"routing_iterations", c.routing.iterations},
      {"routing_prior", c.routing.prior_init},
      {"decoder_widths", c.decoder_widths}};
}

inline void from_json(const nlohmann::json& j, XCapsConfig& c) {
  j.at("input_size").get_to(c.input_size);
  j.at("conv_filters").get_to(c.conv_filters);
  j.at("conv_kernel").get_to(c.conv_kernel);
  j.at("primary_types").get_to(c.primary_types);
  j.at("primary_dim").get_to(c.primary_dim);
  j.at("primary_kernel").get_to(c.primary_kernel);
  j.at("primary_stride").get_to(c.primary_stride);
  j.at("attr_count").get_to(c.attr_count);
  j.at("attr_dim").get_to(c.attr_dim);
  j.at("malignancy_classes").get_to(c.malignancy_classes);
  j.at("malignancy_outputs").get_to(c.malignancy_outputs);
  c.routing.mode = j.at("routing_mode").get<std::string>() == "sigmoid"
                       ? caps::RoutingMode::kSigmoid
                       : caps::RoutingMode::kSoftmax;
  j.at("routing_iterations").get_to(c.routing.iterations);
  j.at("routing_prior").get_to(c.routing.prior_init);
  j.at("decoder_widths").get_to(c.decoder_widths);
}

template <typename T>
struct Parameter {
  std::string name;
  Shape shape;
  std::shared_ptr<std::vector<T>> values;

  std::size_t size() const { return values->size(); }
};

template <typename T>
struct ForwardOutput {
  caps::CapsuleTensor<T> attr_capsules;    // [attr_count x 1 x attr_dim]
  Tensor<T> attr_vectors;                  // [attr_count x attr_dim]
  Tensor<T> attr_scores;                   // [attr_count], norms in [0,1)
  Tensor<T> logits;                        // [malignancy_outputs]
  Tensor<T> reconstruction;                // [pixels], empty when skipped
  std::vector<T> routing_coefficients;     // final r, [children x attr_count]
  std::vector<Tensor<T>> bound_params;     // leaves aligned with parameters(); set when taped
};

template <typename T>
struct ForwardOptions {
  Tape<T>* tape = nullptr;  // when set, parameters are differentiable leaves
  bool with_reconstruction = true;
  const std::vector<T>* fixed_routing = nullptr;
};

template <typename T>
class XCapsModel {
 public:
  XCapsModel() = default;

  static XCapsModel build(const XCapsConfig& config, std::uint64_t seed) {
    config.validate();
    XCapsModel m;
    m.config_ = config;
    m.seed_ = seed;
    const std::size_t caps_channels = config.primary_types * config.primary_dim;

    m.add_weight("conv1.weight",
                 Shape{config.conv_filters, 1, config.conv_kernel, config.conv_kernel},
                 config.conv_kernel * config.conv_kernel,
                 config.conv_filters * config.conv_kernel * config.conv_kernel);
    m.add_zeros("conv1.bias", Shape{config.conv_filters});
    m.add_weight("primary.weight",
                 Shape{caps_channels, config.conv_filters, config.primary_kernel, config.primary_kernel},
                 config.conv_filters * config.primary_kernel * config.primary_kernel,
                 caps_channels * config.primary_kernel * config.primary_kernel);
    m.add_zeros("primary.bias", Shape{caps_channels});
    // every child contributes to each parent's pre-squash sum, so the parent
    // unit's fan-in spans all routed child components
    m.add_weight("attrcaps.weight",
                 Shape{config.child_count(), config.attr_count, config.attr_dim, config.primary_dim},
                 config.child_count() * config.primary_dim, config.attr_dim);
    m.add_weight("head.weight", Shape{config.head_inputs(), config.malignancy_outputs},
                 config.head_inputs(), config.malignancy_outputs);
    m.add_zeros("head.bias", Shape{1, config.malignancy_outputs});

    std::size_t in = config.head_inputs();
    std::vector<std::size_t> widths = config.decoder_widths;
    widths.push_back(config.pixels());
    for (std::size_t i = 0; i < widths.size(); ++i) {
      const std::string base = "decoder." + std::to_string(i);
      m.add_weight(base + ".weight", Shape{in, widths[i]}, in, widths[i]);
      m.add_zeros(base + ".bias", Shape{1, widths[i]});
      in = widths[i];
    }
    return m;
  }

  const XCapsConfig& config() const { return config_; }
  std::uint64_t seed() const { return seed_; }

  std::vector<Parameter<T>>& parameters() { return params_; }
  const std::vector<Parameter<T>>& parameters() const { return params_; }

  const Parameter<T>& param(const std::string& name) const {
    for (const auto& p : params_)
      if (p.name == name) return p;
    throw std::invalid_argument("model: unknown parameter " + name);
  }

  Parameter<T>& param(const std::string& name) {
    for (auto& p : params_)
      if (p.name == name) return p;
    throw std::invalid_argument("model: unknown parameter " + name);
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.size();
    return n;
  }

  std::size_t param_index(const std::string& name) const {
    for (std::size_t i = 0; i < params_.size(); ++i)
      if (params_[i].name == name) return i;
    throw std::invalid_argument("model: unknown parameter " + name);
  }

  // Forward pass on one image (row-major, pixels() values in [0,1]). With a
  // tape, every parameter is bound as a differentiable leaf up front, so even
  // branches that are skipped read back zero gradients after backward.
  ForwardOutput<T> forward(const std::vector<T>& image, const ForwardOptions<T>& opts = {}) const {
    if (image.size() != config_.pixels())
      throw std::invalid_argument("forward: expected " + std::to_string(config_.pixels()) +
                                  " pixels, got " + std::to_string(image.size()));
    return forward_tensor(
        Tensor<T>(Shape{1, config_.input_size, config_.input_size}, std::vector<T>(image)), opts);
  }

  // Same pass over an already-built (possibly taped) image tensor.
  ForwardOutput<T> forward_tensor(const Tensor<T>& image, const ForwardOptions<T>& opts = {}) const {
    const XCapsConfig& c = config_;
    if (image.size() != c.pixels())
      throw std::invalid_argument("forward: expected " + std::to_string(c.pixels()) +
                                  " pixels, got " + std::to_string(image.size()));

    ForwardOutput<T> out;
    if (opts.tape) {
      out.bound_params.reserve(params_.size());
      for (const Parameter<T>& p : params_)
        out.bound_params.push_back(opts.tape->leaf(p.shape, p.values, true));
    }
    auto P = [&](const std::string& name) {
      const std::size_t i = param_index(name);
      if (opts.tape) return out.bound_params[i];
      return TensorAccess::make<T>(params_[i].shape, params_[i].values, nullptr, -1);
    };

    Tensor<T> x = reshape(image, Shape{1, c.input_size, c.input_size});
    Tensor<T> features = relu(conv2d(x, P("conv1.weight"), P("conv1.bias"), 1));
    caps::CapsuleTensor<T> primary =
        caps::primary_caps_layer(features, P("primary.weight"), P("primary.bias"),
                                 c.primary_stride, c.primary_types, c.primary_dim);

    std::optional<std::vector<T>> fixed;
    if (opts.fixed_routing) fixed = *opts.fixed_routing;
    caps::FcCapsOutput<T> attr = caps::fc_caps_layer(primary, P("attrcaps.weight"), c.routing, fixed);

    out.attr_capsules = attr.capsules;
    out.routing_coefficients = std::move(attr.coefficients);
    out.attr_vectors = reshape(attr.capsules.data, Shape{c.attr_count, c.attr_dim});
    out.attr_scores = l2_norm(out.attr_vectors, 1);

    Tensor<T> flat = reshape(out.attr_vectors, Shape{1, c.head_inputs()});
    out.logits = reshape(add(matmul(flat, P("head.weight")), P("head.bias")),
                         Shape{c.malignancy_outputs});
    if (opts.with_reconstruction) out.reconstruction = decode_flat(flat, P);
    return out;
  }

  // Decoder only, from attribute capsule vectors laid out [attr_count x attr_dim].
  Tensor<T> decode(const std::vector<T>& attr_vectors, Tape<T>* tape = nullptr) const {
    if (attr_vectors.size() != config_.head_inputs())
      throw std::invalid_argument("decode: expected " + std::to_string(config_.head_inputs()) +
                                  " values");
    Tensor<T> flat(Shape{1, config_.head_inputs()}, std::vector<T>(attr_vectors));
    auto P = [&](const std::string& name) {
      const Parameter<T>& p = param(name);
      if (tape) return tape->leaf(p.shape, p.values, true);
      return TensorAccess::make<T>(p.shape, p.values, nullptr, -1);
    };
    return decode_flat(flat, P);
  }

  // Deep copy: parameter buffers are shared by default, training snapshots
  // need their own.
  XCapsModel clone() const {
    XCapsModel m;
    m.config_ = config_;
    m.seed_ = seed_;
    m.params_.reserve(params_.size());
    for (const Parameter<T>& p : params_)
      m.params_.push_back(
          Parameter<T>{p.name, p.shape, std::make_shared<std::vector<T>>(*p.values)});
    return m;
  }

 private:
  template <typename Resolver>
  Tensor<T> decode_flat(const Tensor<T>& flat, Resolver P) const {
    Tensor<T> h = flat;
    const std::size_t layers = config_.decoder_widths.size() + 1;
    for (std::size_t i = 0; i < layers; ++i) {
      const std::string base = "decoder." + std::to_string(i);
      h = add(matmul(h, P(base + ".weight")), P(base + ".bias"));
      h = (i + 1 == layers) ? sigmoid(h) : relu(h);
    }
    return reshape(h, Shape{config_.pixels()});
  }

  void add_weight(std::string name, Shape shape, std::size_t fan_in, std::size_t fan_out) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    Rng rng(mix_seed(seed_, fnv1a(name)));
    auto vals = std::make_shared<std::vector<T>>(numel(shape));
    for (T& v : *vals) v = static_cast<T>(rng.uniform(-limit, limit));
    params_.push_back(Parameter<T>{std::move(name), std::move(shape), std::move(vals)});
  }

  void add_zeros(std::string name, Shape shape) {
    auto vals = std::make_shared<std::vector<T>>(numel(shape), T(0));
    params_.push_back(Parameter<T>{std::move(name), std::move(shape), std::move(vals)});
  }

  static std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char ch : s) {
      h ^= ch;
      h *= 1099511628211ULL;
    }
    return h;
  }

  XCapsConfig config_;
  std::uint64_t seed_ = 0;
  std::vector<Parameter<T>> params_;
};

// scores in [0,1) mapped onto the radiologists' 1-5 scale
template <typename T>
std::vector<double> attribute_scores_to_scale(const std::vector<T>& scores) {
  std::vector<double> out(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const double s = static_cast<double>(scores[i]);
    if (s < 0.0 || s >= 1.0)
      throw std::invalid_argument("attribute_scores_to_scale: score " + std::to_string(s) +
                                  " outside [0,1)");
    out[i] = 1.0 + 4.0 * s;
  }
  return out;
}

// Per-attribute share of each malignancy logit through the head weights:
// entry (n,k) sums attribute n's contribution to class k, so summing over n
// and adding the bias reproduces the logits.
template <typename T>
std::vector<std::vector<double>> contribution_report(const XCapsModel<T>& model,
                                                     const std::vector<T>& attr_vectors) {
  const XCapsConfig& c = model.config();
  if (attr_vectors.size() != c.head_inputs())
    throw std::invalid_argument("contribution_report: expected " +
                                std::to_string(c.head_inputs()) + " values");
  const auto& w = *model.param("head.weight").values;  // [head_inputs x outputs]
  std::vector<std::vector<double>> report(c.attr_count,
                                          std::vector<double>(c.malignancy_outputs, 0.0));
  for (std::size_t n = 0; n < c.attr_count; ++n)
    for (std::size_t d = 0; d < c.attr_dim; ++d) {
      const std::size_t row = n * c.attr_dim + d;
      const double v = static_cast<double>(attr_vectors[row]);
      for (std::size_t k = 0; k < c.malignancy_outputs; ++k)
        report[n][k] += v * static_cast<double>(w[row * c.malignancy_outputs + k]);
    }
  return report;
}

// Reconstructions under individual perturbations of one capsule dimension.
template <typename T>
std::vector<std::vector<T>> perturb_and_decode(const XCapsModel<T>& model,
                                               const std::vector<T>& attr_vectors,
                                               std::size_t attr_idx, std::size_t dim_idx,
                                               const std::vector<double>& deltas) {
  const XCapsConfig& c = model.config();
  if (attr_idx >= c.attr_count || dim_idx >= c.attr_dim)
    throw std::invalid_argument("perturb_and_decode: index out of range");
  std::vector<std::vector<T>> images;
  images.reserve(deltas.size());
  for (double delta : deltas) {
    std::vector<T> v(attr_vectors);
    v[attr_idx * c.attr_dim + dim_idx] += static_cast<T>(delta);
    images.push_back(model.decode(v).values());
  }
  return images;
}

inline std::vector<double> default_sweep_deltas() {
  std::vector<double> d;
  for (int i = -5; i <= 5; ++i) d.push_back(0.05 * i);
  return d;
}

// ---------------------------------------------------------------------------
// checkpoint format: "XCAP" | u32 version | u64 json length | config json |
// u64 seed | u32 param count | per parameter: u32 name length, name bytes,
// u32 rank, u64 extents, little-endian f64 values. Round-trips byte-exactly.

namespace detail_model {

inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename V>
void put(std::ofstream& out, V v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V take(std::ifstream& in) {
  V v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(V));
  if (!in) throw std::runtime_error("checkpoint: truncated file");
  return v;
}

}  // namespace detail_model

template <typename T>
void save_checkpoint(const XCapsModel<T>& model, const std::filesystem::path& file) {
  namespace dm = detail_model;
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("checkpoint: cannot open " + file.string());
  out.write("XCAP", 4);
  dm::put<std::uint32_t>(out, dm::kCheckpointVersion);
  const std::string cfg = nlohmann::json(model.config()).dump();
  dm::put<std::uint64_t>(out, cfg.size());
  out.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  dm::put<std::uint64_t>(out, model.seed());
  dm::put<std::uint32_t>(out, static_cast<std::uint32_t>(model.parameters().size()));
  for (const Parameter<T>& p : model.parameters()) {
    dm::put<std::uint32_t>(out, static_cast<std::uint32_t>(p.name.size()));
    out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    dm::put<std::uint32_t>(out, static_cast<std::uint32_t>(p.shape.size()));
    for (std::size_t e : p.shape) dm::put<std::uint64_t>(out, e);
    for (T v : *p.values) dm::put<double>(out, static_cast<double>(v));
  }
  if (!out) throw std::runtime_error("checkpoint: write failed for " + file.string());
}

template <typename T>
XCapsModel<T> load_checkpoint(const std::filesystem::path& file) {
  namespace dm = detail_model;
  std::ifstream in(file, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + file.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::string(magic, 4) != "XCAP")
    throw std::runtime_error("checkpoint: bad magic in " + file.string());
  const auto version = dm::take<std::uint32_t>(in);
  if (version != dm::kCheckpointVersion)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  const auto json_len = dm::take<std::uint64_t>(in);
  std::string cfg_text(json_len, '\0');
  in.read(cfg_text.data(), static_cast<std::streamsize>(json_len));
  if (!in) throw std::runtime_error("checkpoint: truncated config");
  const XCapsConfig config = nlohmann::json::parse(cfg_text).get<XCapsConfig>();
  const auto seed = dm::take<std::uint64_t>(in);

  XCapsModel<T> model = XCapsModel<T>::build(config, seed);
  const auto count = dm::take<std::uint32_t>(in);
  if (count != model.parameters().size())
    throw std::runtime_error("checkpoint: parameter count mismatch");
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = dm::take<std::uint32_t>(in);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    const auto rank = dm::take<std::uint32_t>(in);
    Shape shape(rank);
    for (auto& e : shape) e = dm::take<std::uint64_t>(in);
    Parameter<T>& p = model.param(name);
    if (p.shape != shape)
      throw std::runtime_error("checkpoint: shape mismatch for " + name);
    for (T& v : *p.values) v = static_cast<T>(dm::take<double>(in));
  }
  return model;
}

}  // namespace xcaps::model
