#pragma once

// Compact fully-convolutional encoder/decoder segmentation network with
// batch-norm layers, optional auxiliary heads (reconstruction / rotation
// classification / super-resolution) and flat parameter-subset plumbing.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "tta/crc32.hpp"
#include "tta/error.hpp"
#include "tta/rng.hpp"
#include "tta/tensor.hpp"

namespace tta {

enum class AuxHead { reconstruction, rotation4, superres };

inline const char* aux_head_name(AuxHead h) {
    switch (h) {
        case AuxHead::reconstruction: return "reconstruction";
        case AuxHead::rotation4: return "rotation4";
        case AuxHead::superres: return "superres";
    }
    return "?";
}

struct SegNetConfig {
    int in_channels = 1;
    int base_width = 8;
    int depth = 3;  // encoder stages with widths base_width * 2^k
    int out_channels = 2;
    std::set<AuxHead> aux_heads = {AuxHead::reconstruction, AuxHead::rotation4,
                                   AuxHead::superres};
    uint64_t seed = 0;

    void validate() const {
        if (in_channels < 1 || base_width < 1 || depth < 1 || out_channels < 1)
            fail(ErrorCode::invalid_argument, "SegNetConfig: all sizes must be positive");
    }
};

enum class ParamTag { affine, conv_weight, conv_bias, head };
enum class ParamSubset { affine, all };

inline const char* param_subset_name(ParamSubset s) {
    return s == ParamSubset::affine ? "affine" : "all";
}

template <typename S>
struct ParamEntry {
    std::string name;
    Tensor<S> tensor;
    ParamTag tag;
};

struct ParamSlice {
    std::string name;
    int64_t offset;
    int64_t length;
};

// Flattened view of a parameter subset, in registry order.
template <typename S>
struct ParamVector {
    ParamSubset subset = ParamSubset::affine;
    std::vector<S> values;
    std::vector<ParamSlice> layout;

    int64_t size() const { return static_cast<int64_t>(values.size()); }
};

namespace detail {

template <typename S>
const char* dtype_name() {
    if constexpr (sizeof(S) == 4) return "f32";
    return "f64";
}

}  // namespace detail

template <typename S>
class SegNet {
  public:
    explicit SegNet(const SegNetConfig& config) : config_(config) {
        config_.validate();
        Rng rng(derive_seed(config_.seed, 0xc0dec0deULL));
        build(rng);
    }

    const SegNetConfig& config() const { return config_; }

    // Whether train-mode batch norm folds batch statistics into the running
    // buffers. Off during adaptation: statistics are recollected per input
    // and the buffers stay frozen.
    bool update_running = false;

    bool has_head(AuxHead h) const { return config_.aux_heads.count(h) > 0; }

    // ------------------------------------------------------------------
    // Forward passes

    // Sigmoid probability maps, out_channels x H x W.
    Tensor<S> forward_seg(const Tensor<S>& x, BnMode mode) {
        auto acts = encode(x, mode);
        Tensor<S> h = decode(dec_, acts, mode);
        Tensor<S> logits = conv2d(h, seg_out_w_, seg_out_b_, 1, 0);
        return sigmoid(logits);
    }

    Tensor<S> forward_aux(const Tensor<S>& x, AuxHead head, BnMode mode) {
        if (!has_head(head))
            fail(ErrorCode::invalid_argument,
                 std::string("forward_aux: head not built: ") + aux_head_name(head));
        switch (head) {
            case AuxHead::reconstruction: {
                auto acts = encode(x, mode);
                Tensor<S> h = decode(recon_, acts, mode);
                return conv2d(h, recon_out_w_, recon_out_b_, 1, 0);
            }
            case AuxHead::rotation4: {
                auto acts = encode(x, mode);
                Tensor<S> feat = global_avg_pool(acts.back());
                Tensor<S> logits = linear(feat, rot_w_, rot_b_);
                if (logits.dim(0) == 1) return reshape(logits, {4});
                return logits;
            }
            case AuxHead::superres: {
                // reconstructs the full-resolution image from a x4 block
                // average of the input
                Tensor<S> down = resample(x, ResampleMode::down_avg, 4);
                auto acts = encode(down, mode);
                Tensor<S> h = decode(sr_, acts, mode);
                h = resample(h, ResampleMode::up_nearest, 4);
                return conv2d(h, sr_out_w_, sr_out_b_, 1, 1);
            }
        }
        fail(ErrorCode::invalid_argument, "forward_aux: unknown head");
    }

    // ------------------------------------------------------------------
    // Parameter plumbing

    const std::vector<ParamEntry<S>>& params() const { return registry_; }
    const std::vector<ParamEntry<S>>& buffers() const { return buffer_registry_; }

    void set_trainable(ParamSubset subset) {
        for (auto& e : registry_)
            e.tensor.set_requires_grad(subset == ParamSubset::all || e.tag == ParamTag::affine);
    }

    void zero_grads() {
        for (auto& e : registry_) e.tensor.zero_grad();
    }

    ParamVector<S> collect_params(ParamSubset subset) const {
        ParamVector<S> pv;
        pv.subset = subset;
        for (const auto& e : registry_) {
            if (!in_subset(e, subset)) continue;
            pv.layout.push_back({e.name, pv.size(), e.tensor.numel()});
            pv.values.insert(pv.values.end(), e.tensor.values().begin(), e.tensor.values().end());
        }
        return pv;
    }

    ParamVector<S> collect_grads(ParamSubset subset) const {
        ParamVector<S> pv;
        pv.subset = subset;
        for (const auto& e : registry_) {
            if (!in_subset(e, subset)) continue;
            pv.layout.push_back({e.name, pv.size(), e.tensor.numel()});
            const auto& g = e.tensor.grad();
            if (g.empty())
                pv.values.insert(pv.values.end(), static_cast<size_t>(e.tensor.numel()), S(0));
            else
                pv.values.insert(pv.values.end(), g.begin(), g.end());
        }
        return pv;
    }

    void apply_params(const ParamVector<S>& pv) {
        int64_t expected = 0;
        for (const auto& e : registry_)
            if (in_subset(e, pv.subset)) expected += e.tensor.numel();
        if (expected != pv.size())
            fail(ErrorCode::shape_mismatch, "apply_params: subset length mismatch");
        int64_t pos = 0;
        for (auto& e : registry_) {
            if (!in_subset(e, pv.subset)) continue;
            std::copy(pv.values.begin() + pos, pv.values.begin() + pos + e.tensor.numel(),
                      e.tensor.values().begin());
            pos += e.tensor.numel();
        }
    }

    int64_t param_count() const {
        int64_t n = 0;
        for (const auto& e : registry_) n += e.tensor.numel();
        return n;
    }

    SegNet clone() const {
        SegNet copy(config_);
        copy.update_running = update_running;
        for (size_t i = 0; i < registry_.size(); ++i)
            copy.registry_[i].tensor.values() = registry_[i].tensor.values();
        for (size_t i = 0; i < buffer_registry_.size(); ++i)
            copy.buffer_registry_[i].tensor.values() = buffer_registry_[i].tensor.values();
        return copy;
    }

    // ------------------------------------------------------------------
    // Weights file: "GTWT", u16 version, u32-length-prefixed text header of
    // (name, dtype, shape) per tensor in registry order (buffers after
    // parameters), little-endian payload, trailing CRC32 of the payload.

    void save_weights(const std::string& path) const {
        std::string header;
        std::string payload;
        auto append = [&](const ParamEntry<S>& e) {
            header += e.name;
            header += ' ';
            header += detail::dtype_name<S>();
            header += ' ';
            for (size_t i = 0; i < e.tensor.shape().size(); ++i) {
                if (i) header += 'x';
                header += std::to_string(e.tensor.shape()[i]);
            }
            header += '\n';
            const auto& v = e.tensor.values();
            const size_t bytes = v.size() * sizeof(S);
            const size_t at = payload.size();
            payload.resize(at + bytes);
            std::memcpy(payload.data() + at, v.data(), bytes);
        };
        for (const auto& e : registry_) append(e);
        for (const auto& e : buffer_registry_) append(e);

        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) fail(ErrorCode::io, "save_weights: cannot open " + path);
        out.write("GTWT", 4);
        const uint16_t version = 1;
        write_le(out, version);
        write_le(out, static_cast<uint32_t>(header.size()));
        out.write(header.data(), static_cast<std::streamsize>(header.size()));
        out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
        write_le(out, crc32(payload.data(), payload.size()));
        if (!out) fail(ErrorCode::io, "save_weights: write failed for " + path);
    }

    // Validates magic, version, header table and payload checksum before any
    // tensor is touched; on failure the model is left unchanged.
    void load_weights(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) fail(ErrorCode::io, "load_weights: cannot open " + path);
        char magic[4];
        in.read(magic, 4);
        if (!in || std::memcmp(magic, "GTWT", 4) != 0)
            fail(ErrorCode::format, "load_weights: bad magic in " + path);
        uint16_t version = read_le<uint16_t>(in);
        if (version != 1) fail(ErrorCode::format, "load_weights: unsupported version");
        uint32_t header_len = read_le<uint32_t>(in);
        std::string header(header_len, '\0');
        in.read(header.data(), header_len);
        if (!in) fail(ErrorCode::format, "load_weights: truncated header");

        std::vector<ParamEntry<S>*> order;
        for (auto& e : registry_) order.push_back(&e);
        for (auto& e : buffer_registry_) order.push_back(&e);

        size_t line_start = 0, entry = 0;
        size_t total = 0;
        while (line_start < header.size()) {
            size_t eol = header.find('\n', line_start);
            if (eol == std::string::npos) break;
            const std::string line = header.substr(line_start, eol - line_start);
            line_start = eol + 1;
            if (line.empty()) continue;
            if (entry >= order.size())
                fail(ErrorCode::format, "load_weights: more tensors than the model has");
            const size_t sp1 = line.find(' ');
            const size_t sp2 = line.find(' ', sp1 + 1);
            if (sp1 == std::string::npos || sp2 == std::string::npos)
                fail(ErrorCode::format, "load_weights: malformed header line: " + line);
            const std::string name = line.substr(0, sp1);
            const std::string dtype = line.substr(sp1 + 1, sp2 - sp1 - 1);
            const std::string dims = line.substr(sp2 + 1);
            ParamEntry<S>* e = order[entry++];
            if (name != e->name)
                fail(ErrorCode::format, "load_weights: tensor name mismatch: expected " +
                                            e->name + ", file has " + name);
            if (dtype != detail::dtype_name<S>())
                fail(ErrorCode::format, "load_weights: dtype mismatch for " + name);
            Shape shape;
            size_t p = 0;
            while (p < dims.size()) {
                size_t q = dims.find('x', p);
                if (q == std::string::npos) q = dims.size();
                shape.push_back(std::stoi(dims.substr(p, q - p)));
                p = q + 1;
            }
            if (shape != e->tensor.shape())
                fail(ErrorCode::format, "load_weights: shape mismatch for " + name);
            total += static_cast<size_t>(e->tensor.numel()) * sizeof(S);
        }
        if (entry != order.size())
            fail(ErrorCode::format, "load_weights: fewer tensors than the model has");

        std::string payload(total, '\0');
        in.read(payload.data(), static_cast<std::streamsize>(total));
        if (!in) fail(ErrorCode::format, "load_weights: truncated payload");
        const uint32_t expect_crc = read_le<uint32_t>(in);
        if (crc32(payload.data(), payload.size()) != expect_crc)
            fail(ErrorCode::format, "load_weights: payload checksum mismatch");

        size_t at = 0;
        for (ParamEntry<S>* e : order) {
            const size_t bytes = static_cast<size_t>(e->tensor.numel()) * sizeof(S);
            std::memcpy(e->tensor.values().data(), payload.data() + at, bytes);
            at += bytes;
        }
    }

  private:
    struct ConvLayer {
        Tensor<S> w, b;
        int pad = 1;
    };
    struct BnLayer {
        Tensor<S> gamma, beta, running_mean, running_var;
    };
    struct DecoderStack {
        std::vector<ConvLayer> convs;  // stage D-2 .. 0
        std::vector<BnLayer> bns;
    };

    bool in_subset(const ParamEntry<S>& e, ParamSubset s) const {
        return s == ParamSubset::all || e.tag == ParamTag::affine;
    }

    int width(int k) const { return config_.base_width << k; }

    Tensor<S> bn_forward(BnLayer& layer, const Tensor<S>& x, BnMode mode) {
        return batch_norm2d(x, layer.gamma, layer.beta, layer.running_mean, layer.running_var,
                            mode, S(0.1), S(1e-5), update_running && mode == BnMode::train);
    }

    std::vector<Tensor<S>> encode(const Tensor<S>& x, BnMode mode) {
        if (x.shape().size() != 4 || x.dim(1) != config_.in_channels)
            fail(ErrorCode::shape_mismatch, "forward: expected NCHW with " +
                                                std::to_string(config_.in_channels) +
                                                " input channels, got " + shape_str(x.shape()));
        if (x.dim(2) != x.dim(3))
            fail(ErrorCode::shape_mismatch, "forward: input must be square");
        std::vector<Tensor<S>> acts;
        Tensor<S> h = x;
        for (int k = 0; k < config_.depth; ++k) {
            if (k > 0) h = resample(h, ResampleMode::down_avg, 2);
            h = conv2d(h, enc_convs_[k].w, enc_convs_[k].b, 1, enc_convs_[k].pad);
            h = bn_forward(enc_bns_[k], h, mode);
            h = relu(h);
            acts.push_back(h);
        }
        return acts;
    }

    Tensor<S> decode(DecoderStack& stack, const std::vector<Tensor<S>>& acts, BnMode mode) {
        Tensor<S> h = acts.back();
        for (int k = config_.depth - 2; k >= 0; --k) {
            const size_t i = static_cast<size_t>(config_.depth - 2 - k);
            h = resample(h, ResampleMode::up_nearest, 2);
            h = concat_channels(h, acts[static_cast<size_t>(k)]);
            h = conv2d(h, stack.convs[i].w, stack.convs[i].b, 1, stack.convs[i].pad);
            h = bn_forward(stack.bns[i], h, mode);
            h = relu(h);
        }
        return h;
    }

    // ------------------------------------------------------------------
    // Construction

    Tensor<S> make_conv_weight(Rng& rng, int out_c, int in_c, int k) {
        Tensor<S> w = Tensor<S>::zeros({out_c, in_c, k, k});
        const double std_dev = std::sqrt(2.0 / (static_cast<double>(in_c) * k * k));
        for (auto& v : w.values()) v = static_cast<S>(rng.normal() * std_dev);
        return w;
    }

    ConvLayer make_conv(Rng& rng, const std::string& name, int out_c, int in_c, int k, int pad,
                        ParamTag weight_tag, ParamTag bias_tag) {
        ConvLayer layer;
        layer.w = make_conv_weight(rng, out_c, in_c, k);
        layer.b = Tensor<S>::zeros({out_c});
        layer.pad = pad;
        registry_.push_back({name + ".weight", layer.w, weight_tag});
        registry_.push_back({name + ".bias", layer.b, bias_tag});
        return layer;
    }

    BnLayer make_bn(const std::string& name, int channels) {
        BnLayer layer;
        layer.gamma = Tensor<S>::full({channels}, S(1));
        layer.beta = Tensor<S>::zeros({channels});
        layer.running_mean = Tensor<S>::zeros({channels});
        layer.running_var = Tensor<S>::full({channels}, S(1));
        registry_.push_back({name + ".gamma", layer.gamma, ParamTag::affine});
        registry_.push_back({name + ".beta", layer.beta, ParamTag::affine});
        buffer_registry_.push_back({name + ".running_mean", layer.running_mean, ParamTag::affine});
        buffer_registry_.push_back({name + ".running_var", layer.running_var, ParamTag::affine});
        return layer;
    }

    DecoderStack make_decoder(Rng& rng, const std::string& prefix, ParamTag weight_tag,
                              ParamTag bias_tag) {
        DecoderStack stack;
        for (int k = config_.depth - 2; k >= 0; --k) {
            const std::string name = prefix + ".dec" + std::to_string(k);
            stack.convs.push_back(
                make_conv(rng, name + ".conv", width(k), width(k + 1) + width(k), 3, 1,
                          weight_tag, bias_tag));
            stack.bns.push_back(make_bn(name + ".bn", width(k)));
        }
        return stack;
    }

    void build(Rng& rng) {
        for (int k = 0; k < config_.depth; ++k) {
            const int in_c = k == 0 ? config_.in_channels : width(k - 1);
            const std::string name = "enc" + std::to_string(k);
            enc_convs_.push_back(make_conv(rng, name + ".conv", width(k), in_c, 3, 1,
                                           ParamTag::conv_weight, ParamTag::conv_bias));
            enc_bns_.push_back(make_bn(name + ".bn", width(k)));
        }
        dec_ = make_decoder(rng, "seg", ParamTag::conv_weight, ParamTag::conv_bias);
        {
            seg_out_w_ = make_conv_weight(rng, config_.out_channels, width(0), 1);
            seg_out_b_ = Tensor<S>::zeros({config_.out_channels});
            registry_.push_back({"seg.out.weight", seg_out_w_, ParamTag::conv_weight});
            registry_.push_back({"seg.out.bias", seg_out_b_, ParamTag::conv_bias});
        }
        if (has_head(AuxHead::reconstruction)) {
            recon_ = make_decoder(rng, "recon", ParamTag::head, ParamTag::head);
            recon_out_w_ = make_conv_weight(rng, 1, width(0), 1);
            recon_out_b_ = Tensor<S>::zeros({1});
            registry_.push_back({"recon.out.weight", recon_out_w_, ParamTag::head});
            registry_.push_back({"recon.out.bias", recon_out_b_, ParamTag::head});
        }
        if (has_head(AuxHead::rotation4)) {
            const int c = width(config_.depth - 1);
            rot_w_ = Tensor<S>::zeros({4, c});
            const double std_dev = std::sqrt(2.0 / static_cast<double>(c));
            for (auto& v : rot_w_.values()) v = static_cast<S>(rng.normal() * std_dev);
            rot_b_ = Tensor<S>::zeros({4});
            registry_.push_back({"rot.weight", rot_w_, ParamTag::head});
            registry_.push_back({"rot.bias", rot_b_, ParamTag::head});
        }
        if (has_head(AuxHead::superres)) {
            sr_ = make_decoder(rng, "sr", ParamTag::head, ParamTag::head);
            sr_out_w_ = make_conv_weight(rng, 1, width(0), 3);
            sr_out_b_ = Tensor<S>::zeros({1});
            registry_.push_back({"sr.out.weight", sr_out_w_, ParamTag::head});
            registry_.push_back({"sr.out.bias", sr_out_b_, ParamTag::head});
        }
    }

    template <typename T>
    static void write_le(std::ofstream& out, T value) {
        char bytes[sizeof(T)];
        std::memcpy(bytes, &value, sizeof(T));
        out.write(bytes, sizeof(T));
    }

    template <typename T>
    static T read_le(std::ifstream& in) {
        char bytes[sizeof(T)];
        in.read(bytes, sizeof(T));
        T value;
        std::memcpy(&value, bytes, sizeof(T));
        return value;
    }

    SegNetConfig config_;
    std::vector<ConvLayer> enc_convs_;
    std::vector<BnLayer> enc_bns_;
    DecoderStack dec_;
    Tensor<S> seg_out_w_, seg_out_b_;
    DecoderStack recon_;
    Tensor<S> recon_out_w_, recon_out_b_;
    Tensor<S> rot_w_, rot_b_;
    DecoderStack sr_;
    Tensor<S> sr_out_w_, sr_out_b_;
    std::vector<ParamEntry<S>> registry_;
    std::vector<ParamEntry<S>> buffer_registry_;
};

}  // namespace tta
