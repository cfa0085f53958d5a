#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "snet/ops.hpp"
#include "snet/tensor.hpp"

namespace snet::nn {

enum class Init { TruncNormal, KaimingUniform, Zeros, Ones };

struct Param {
    Tensor tensor;
    bool trainable = true;
};

// Registry of named parameters. Initialization is a pure function of
// (init_seed, name, shape, init kind), so two sets built with the same seed
// are bitwise equal regardless of declaration order.
class ParamSet {
  public:
    explicit ParamSet(std::uint64_t init_seed) : init_seed_(init_seed) {}

    Tensor declare(const std::string& name, Shape shape, Init init, bool trainable = true);
    Tensor at(const std::string& name) const;
    bool contains(const std::string& name) const;

    std::uint64_t init_seed() const { return init_seed_; }
    std::int64_t scalar_count(bool trainable_only = true) const;
    std::map<std::string, Param>& entries() { return entries_; }
    const std::map<std::string, Param>& entries() const { return entries_; }

  private:
    std::map<std::string, Param> entries_;
    std::uint64_t init_seed_ = 0;
};

// Encoder stage geometry.
struct StageSpec {
    enum class Kind { Cnn, Vit };
    std::int64_t in_channels = 0;
    std::int64_t out_channels = 0;
    std::int64_t resolution_divisor = 1;  // power of two
    Kind kind = Kind::Cnn;
};

// heads = ceil(channels / 32), bumped up to the next divisor of channels.
std::int64_t pick_heads(std::int64_t channels);

struct Conv2dLayer {
    Tensor kernel, bias;  // bias may be undefined
    std::int64_t stride = 1, padding = 0, groups = 1;

    static Conv2dLayer create(ParamSet& params, const std::string& prefix, std::int64_t in_ch,
                              std::int64_t out_ch, std::int64_t k, std::int64_t stride, std::int64_t padding,
                              std::int64_t groups = 1, bool with_bias = false);
    Tensor forward(Tensor x) const;
};

struct BatchNormLayer {
    Tensor scale, shift, running_mean, running_var;
    double momentum = 0.1;
    double eps = 1e-5;

    static BatchNormLayer create(ParamSet& params, const std::string& prefix, std::int64_t channels);
    Tensor forward(Tensor x, Mode mode) const;
};

struct ConvBnGelu {
    Conv2dLayer conv;
    BatchNormLayer bn;

    static ConvBnGelu create(ParamSet& params, const std::string& prefix, std::int64_t in_ch,
                             std::int64_t out_ch, std::int64_t k, std::int64_t stride, std::int64_t padding,
                             std::int64_t groups = 1);
    Tensor forward(Tensor x, Mode mode) const;
};

// 3x3 depth-wise then 1x1 point-wise convolution, BN + GELU on the output.
struct DwSeparableBnGelu {
    Conv2dLayer depthwise, pointwise;
    BatchNormLayer bn;

    static DwSeparableBnGelu create(ParamSet& params, const std::string& prefix, std::int64_t in_ch,
                                    std::int64_t out_ch);
    Tensor forward(Tensor x, Mode mode) const;
};

struct LinearLayer {
    Tensor weight, bias;  // bias may be undefined

    static LinearLayer create(ParamSet& params, const std::string& prefix, std::int64_t in_dim,
                              std::int64_t out_dim, bool with_bias = true);
    Tensor forward(Tensor x) const;
};

// Plain 3x3 depth-wise convolution with bias (no norm, no activation).
struct DwConvBlock {
    Conv2dLayer conv;

    static DwConvBlock create(ParamSet& params, const std::string& prefix, std::int64_t channels);
    Tensor forward(Tensor x) const;
};

// Strided-convolution tokenizer: kernel size == stride, so the output grid is
// exactly input/stride.
struct PatchEmbed {
    Conv2dLayer conv;
    std::int64_t stride = 1;

    static PatchEmbed create(ParamSet& params, const std::string& prefix, std::int64_t in_ch,
                             std::int64_t out_ch, std::int64_t stride);
    Tensor forward(Tensor x) const;
};

// Multi-head self-attention over (B,N,C) tokens; per-head scale is
// 1/sqrt(C/heads), heads concatenated, then an output projection.
struct MhsaBlock {
    LinearLayer wq, wk, wv, wo;
    std::int64_t heads = 1;

    static MhsaBlock create(ParamSet& params, const std::string& prefix, std::int64_t channels,
                            std::int64_t heads);
    Tensor forward(Tensor tokens) const;
};

// Single-head cross attention: queries from the first input, keys/values from
// the second. The output projection is optional (the value-recovery block
// applies none).
struct CrossAttentionBlock {
    LinearLayer wq, wk, wv;
    LinearLayer wo;  // weight undefined when not created
    bool has_out_proj = false;

    static CrossAttentionBlock create(ParamSet& params, const std::string& prefix, std::int64_t q_dim,
                                      std::int64_t kv_dim, std::int64_t proj_dim, bool with_out_proj);
    Tensor forward(Tensor q_tokens, Tensor kv_tokens) const;
};

// x2 nearest upsample -> 3x3 conv halving channels -> concat skip -> 3x3 conv
// back to the halved width. Output: skip resolution, in_ch/2 channels.
struct UpsampleBlock {
    ConvBnGelu pre, post;

    static UpsampleBlock create(ParamSet& params, const std::string& prefix, std::int64_t in_ch,
                                std::int64_t skip_ch);
    Tensor forward(Tensor x, Tensor skip, Mode mode) const;
};

}  // namespace snet::nn
