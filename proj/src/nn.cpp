#include "snet/nn.hpp"

#include <cmath>

#include "snet/rng.hpp"

namespace snet::nn {

namespace op = snet::ops;

Tensor ParamSet::declare(const std::string& name, Shape shape, Init init, bool trainable) {
    if (entries_.count(name) != 0) {
        throw ConfigError("parameter declared twice: " + name);
    }
    Tensor t = Tensor::zeros(shape, trainable);
    Rng rng(derive_seed(init_seed_, hash_name(name)));
    switch (init) {
        case Init::Zeros:
            break;
        case Init::Ones:
            std::fill(t.data().begin(), t.data().end(), 1.0);
            break;
        case Init::TruncNormal:
            for (double& v : t.data()) v = rng.truncated_normal(0.02, -0.04, 0.04);
            break;
        case Init::KaimingUniform: {
            // fan_in for conv kernels (out, in/groups, kh, kw) and for linear
            // weights (in, out) alike: everything except the output extent.
            std::int64_t fan_in = 1;
            if (shape.size() == 4) {
                fan_in = shape[1] * shape[2] * shape[3];
            } else if (shape.size() == 2) {
                fan_in = shape[0];
            } else {
                fan_in = shape_numel(shape);
            }
            const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
            for (double& v : t.data()) v = rng.uniform(-bound, bound);
            break;
        }
    }
    entries_.emplace(name, Param{t, trainable});
    return t;
}

Tensor ParamSet::at(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw UsageError("unknown parameter: " + name);
    return it->second.tensor;
}

bool ParamSet::contains(const std::string& name) const { return entries_.count(name) != 0; }

std::int64_t ParamSet::scalar_count(bool trainable_only) const {
    std::int64_t n = 0;
    for (const auto& [name, p] : entries_) {
        if (!trainable_only || p.trainable) n += p.tensor.numel();
    }
    return n;
}

std::int64_t pick_heads(std::int64_t channels) {
    std::int64_t heads = std::max<std::int64_t>(1, (channels + 31) / 32);
    while (channels % heads != 0) ++heads;
    return heads;
}

Conv2dLayer Conv2dLayer::create(ParamSet& params, const std::string& prefix, std::int64_t in_ch,
                                std::int64_t out_ch, std::int64_t k, std::int64_t stride,
                                std::int64_t padding, std::int64_t groups, bool with_bias) {
    if (in_ch % groups != 0 || out_ch % groups != 0) {
        throw ConfigError(prefix + ": channels not divisible by groups");
    }
    Conv2dLayer layer;
    layer.kernel = params.declare(prefix + ".kernel", {out_ch, in_ch / groups, k, k}, Init::KaimingUniform);
    if (with_bias) layer.bias = params.declare(prefix + ".bias", {out_ch}, Init::Zeros);
    layer.stride = stride;
    layer.padding = padding;
    layer.groups = groups;
    return layer;
}

Tensor Conv2dLayer::forward(Tensor x) const { return op::conv2d(x, kernel, bias, stride, padding, groups); }

BatchNormLayer BatchNormLayer::create(ParamSet& params, const std::string& prefix, std::int64_t channels) {
    BatchNormLayer layer;
    layer.scale = params.declare(prefix + ".scale", {channels}, Init::Ones);
    layer.shift = params.declare(prefix + ".shift", {channels}, Init::Zeros);
    layer.running_mean = params.declare(prefix + ".running_mean", {channels}, Init::Zeros, false);
    layer.running_var = params.declare(prefix + ".running_var", {channels}, Init::Ones, false);
    return layer;
}

Tensor BatchNormLayer::forward(Tensor x, Mode mode) const {
    return op::batch_norm(x, scale, shift, running_mean, running_var, momentum, eps, mode);
}

ConvBnGelu ConvBnGelu::create(ParamSet& params, const std::string& prefix, std::int64_t in_ch,
                              std::int64_t out_ch, std::int64_t k, std::int64_t stride, std::int64_t padding,
                              std::int64_t groups) {
    ConvBnGelu block;
    block.conv = Conv2dLayer::create(params, prefix + ".conv", in_ch, out_ch, k, stride, padding, groups);
    block.bn = BatchNormLayer::create(params, prefix + ".bn", out_ch);
    return block;
}

Tensor ConvBnGelu::forward(Tensor x, Mode mode) const { return op::gelu(bn.forward(conv.forward(x), mode)); }

DwSeparableBnGelu DwSeparableBnGelu::create(ParamSet& params, const std::string& prefix, std::int64_t in_ch,
                                            std::int64_t out_ch) {
    DwSeparableBnGelu block;
    block.depthwise = Conv2dLayer::create(params, prefix + ".dw", in_ch, in_ch, 3, 1, 1, in_ch);
    block.pointwise = Conv2dLayer::create(params, prefix + ".pw", in_ch, out_ch, 1, 1, 0);
    block.bn = BatchNormLayer::create(params, prefix + ".bn", out_ch);
    return block;
}

Tensor DwSeparableBnGelu::forward(Tensor x, Mode mode) const {
    return op::gelu(bn.forward(pointwise.forward(depthwise.forward(x)), mode));
}

LinearLayer LinearLayer::create(ParamSet& params, const std::string& prefix, std::int64_t in_dim,
                                std::int64_t out_dim, bool with_bias) {
    LinearLayer layer;
    layer.weight = params.declare(prefix + ".weight", {in_dim, out_dim}, Init::TruncNormal);
    if (with_bias) layer.bias = params.declare(prefix + ".bias", {out_dim}, Init::Zeros);
    return layer;
}

Tensor LinearLayer::forward(Tensor x) const { return op::linear(x, weight, bias); }

DwConvBlock DwConvBlock::create(ParamSet& params, const std::string& prefix, std::int64_t channels) {
    DwConvBlock block;
    block.conv = Conv2dLayer::create(params, prefix + ".dw", channels, channels, 3, 1, 1, channels, true);
    return block;
}

Tensor DwConvBlock::forward(Tensor x) const { return conv.forward(x); }

PatchEmbed PatchEmbed::create(ParamSet& params, const std::string& prefix, std::int64_t in_ch,
                              std::int64_t out_ch, std::int64_t stride) {
    PatchEmbed block;
    block.conv = Conv2dLayer::create(params, prefix + ".proj", in_ch, out_ch, stride, stride, 0, 1, true);
    block.stride = stride;
    return block;
}

Tensor PatchEmbed::forward(Tensor x) const {
    if (x.dim(2) % stride != 0 || x.dim(3) % stride != 0) {
        throw ConfigError("patch_embed: spatial size " + std::to_string(x.dim(2)) + "x" +
                          std::to_string(x.dim(3)) + " not divisible by stride " + std::to_string(stride));
    }
    return conv.forward(x);
}

MhsaBlock MhsaBlock::create(ParamSet& params, const std::string& prefix, std::int64_t channels,
                            std::int64_t heads) {
    if (heads < 1 || channels % heads != 0) {
        throw ConfigError(prefix + ": channels " + std::to_string(channels) + " not divisible by heads " +
                          std::to_string(heads));
    }
    MhsaBlock block;
    block.wq = LinearLayer::create(params, prefix + ".wq", channels, channels);
    block.wk = LinearLayer::create(params, prefix + ".wk", channels, channels);
    block.wv = LinearLayer::create(params, prefix + ".wv", channels, channels);
    block.wo = LinearLayer::create(params, prefix + ".wo", channels, channels);
    block.heads = heads;
    return block;
}

Tensor MhsaBlock::forward(Tensor tokens) const {
    if (tokens.ndim() != 3) throw ConfigError("mhsa expects (B,N,C) tokens");
    const std::int64_t channels = tokens.dim(2);
    const std::int64_t head_dim = channels / heads;
    Tensor q = wq.forward(tokens);
    Tensor k = wk.forward(tokens);
    Tensor v = wv.forward(tokens);
    const std::vector<std::int64_t> head_sizes(static_cast<std::size_t>(heads), head_dim);
    auto qh = op::split(q, head_sizes, 2);
    auto kh = op::split(k, head_sizes, 2);
    auto vh = op::split(v, head_sizes, 2);
    const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
    std::vector<Tensor> out_heads;
    out_heads.reserve(static_cast<std::size_t>(heads));
    for (std::int64_t h = 0; h < heads; ++h) {
        const auto hi = static_cast<std::size_t>(h);
        Tensor scores = op::mul_scalar(op::bmm(qh[hi], op::transpose_last2(kh[hi])), scale);
        Tensor attn = op::softmax(scores, 2);
        out_heads.push_back(op::bmm(attn, vh[hi]));
    }
    return wo.forward(op::concat(out_heads, 2));
}

CrossAttentionBlock CrossAttentionBlock::create(ParamSet& params, const std::string& prefix,
                                                std::int64_t q_dim, std::int64_t kv_dim,
                                                std::int64_t proj_dim, bool with_out_proj) {
    CrossAttentionBlock block;
    block.wq = LinearLayer::create(params, prefix + ".wq", q_dim, proj_dim, false);
    block.wk = LinearLayer::create(params, prefix + ".wk", kv_dim, proj_dim, false);
    block.wv = LinearLayer::create(params, prefix + ".wv", kv_dim, proj_dim, false);
    if (with_out_proj) {
        block.wo = LinearLayer::create(params, prefix + ".wo", proj_dim, q_dim, false);
        block.has_out_proj = true;
    }
    return block;
}

Tensor CrossAttentionBlock::forward(Tensor q_tokens, Tensor kv_tokens) const {
    if (q_tokens.ndim() != 3 || kv_tokens.ndim() != 3 || q_tokens.dim(0) != kv_tokens.dim(0)) {
        throw ConfigError("cross_attention expects (B,N,C) token sets with equal batch");
    }
    Tensor q = wq.forward(q_tokens);
    Tensor k = wk.forward(kv_tokens);
    Tensor v = wv.forward(kv_tokens);
    const double scale = 1.0 / std::sqrt(static_cast<double>(q.dim(2)));
    Tensor attn = op::softmax(op::mul_scalar(op::bmm(q, op::transpose_last2(k)), scale), 2);
    Tensor out = op::bmm(attn, v);
    return has_out_proj ? wo.forward(out) : out;
}

UpsampleBlock UpsampleBlock::create(ParamSet& params, const std::string& prefix, std::int64_t in_ch,
                                    std::int64_t skip_ch) {
    if (in_ch % 2 != 0) throw ConfigError(prefix + ": input channels must be even");
    UpsampleBlock block;
    const std::int64_t out_ch = in_ch / 2;
    block.pre = ConvBnGelu::create(params, prefix + ".pre", in_ch, out_ch, 3, 1, 1);
    block.post = ConvBnGelu::create(params, prefix + ".post", out_ch + skip_ch, out_ch, 3, 1, 1);
    return block;
}

Tensor UpsampleBlock::forward(Tensor x, Tensor skip, Mode mode) const {
    if (skip.dim(2) != 2 * x.dim(2) || skip.dim(3) != 2 * x.dim(3)) {
        throw ConfigError("upsample_block: skip resolution must be exactly twice the input");
    }
    Tensor up = pre.forward(op::upsample_nearest(x, 2), mode);
    return post.forward(op::concat_channels({up, skip}), mode);
}

}  // namespace snet::nn
