#pragma once

#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fairpda/cohort.hpp"
#include "fairpda/nn.hpp"
#include "fairpda/tensor.hpp"

namespace fairpda {

enum class AlignMode { none, dann, cdan, partial_cdan, coral };

inline std::string to_string(AlignMode m) {
    switch (m) {
        case AlignMode::none: return "none";
        case AlignMode::dann: return "dann";
        case AlignMode::cdan: return "cdan";
        case AlignMode::partial_cdan: return "partial_cdan";
        case AlignMode::coral: return "coral";
    }
    throw ValidationError("bad align mode");
}

inline AlignMode parse_align_mode(const std::string& s) {
    if (s == "none") return AlignMode::none;
    if (s == "dann") return AlignMode::dann;
    if (s == "cdan") return AlignMode::cdan;
    if (s == "partial_cdan") return AlignMode::partial_cdan;
    if (s == "coral") return AlignMode::coral;
    throw ValidationError("invalid align_mode '" + s + "'");
}

struct BackboneConfig {
    enum class Variant { tiny, resnet18 };
    Variant variant = Variant::tiny;
    int feature_dim = 64;  // 512 for resnet18, <= 128 for tiny
    bool mixstyle_active = true;
    double mixstyle_alpha = 0.1;
    double mixstyle_p_apply = 0.5;

    void validate() const {
        if (feature_dim <= 0) throw ValidationError("model: feature_dim must be > 0");
        if (variant == Variant::resnet18 && feature_dim != 512)
            throw ValidationError("model: resnet18 variant requires feature_dim 512");
        if (variant == Variant::tiny && feature_dim > 128)
            throw ValidationError("model: tiny variant requires feature_dim <= 128");
        if (mixstyle_alpha <= 0.0) throw ValidationError("model: mixstyle alpha must be > 0");
        if (mixstyle_p_apply < 0.0 || mixstyle_p_apply > 1.0)
            throw ValidationError("model: mixstyle p_apply must be in [0,1]");
    }
};

struct HeadsConfig {
    int num_classes = kNumClasses;
    std::vector<int> domain_widths = {256, 256};
    std::vector<int> gender_widths = {256, 64};  // 3-layer MLP: two hidden + output
};

// Outer product per sample, flattened row-major: h[i*K + j] = f[i] * p[j].
inline Tensor multilinear_map(const Tensor& f, const Tensor& p) {
    if (f.ndim() != 2 || p.ndim() != 2 || f.dim(0) != p.dim(0))
        throw ValidationError("multilinear_map: shape mismatch");
    const size_t n = f.dim(0), d = f.dim(1), k = p.dim(1);
    Tensor h({n, d * k});
    for (size_t s = 0; s < n; ++s)
        for (size_t i = 0; i < d; ++i)
            for (size_t j = 0; j < k; ++j)
                h.data[s * d * k + i * k + j] = f.data[s * d + i] * p.data[s * k + j];
    return h;
}

struct ForwardOutput {
    Tensor f;            // N x D
    Tensor task_logits;  // N x K
    Tensor p;            // N x K, softmax rows
};

// The three-branch network: shared backbone (with MixStyle), linear task
// head, conditional domain discriminator over f (x) p, and a gender
// discriminator, with gradient-reversal couplings into the backbone.
class FairPDAModel {
public:
    FairPDAModel(BackboneConfig bc, HeadsConfig hc, AlignMode align, uint64_t seed)
        : bc_(bc), hc_(hc), align_(align), rng_(Rng::derive(seed, "mixstyle")) {
        bc_.validate();
        Rng init(Rng::derive(seed, "init"));
        build_backbone(init);
        const auto d = static_cast<size_t>(bc_.feature_dim);
        const auto k = static_cast<size_t>(hc_.num_classes);
        task_head_ = std::make_unique<nn::Linear>(d, k, init);
        const size_t disc_in = align_ == AlignMode::dann ? d : d * k;
        domain_disc_ = std::make_unique<nn::Sequential>();
        size_t prev = disc_in;
        for (int w : hc_.domain_widths) {
            domain_disc_->add(std::make_unique<nn::Linear>(prev, static_cast<size_t>(w), init));
            domain_disc_->add(std::make_unique<nn::ReLU>());
            prev = static_cast<size_t>(w);
        }
        domain_disc_->add(std::make_unique<nn::Linear>(prev, 1, init));
        if (hc_.gender_widths.size() != 2)
            throw ValidationError("model: gender discriminator must be a 3-layer MLP");
        gender_disc_ = std::make_unique<nn::Sequential>();
        prev = d;
        for (int w : hc_.gender_widths) {
            gender_disc_->add(std::make_unique<nn::Linear>(prev, static_cast<size_t>(w), init));
            gender_disc_->add(std::make_unique<nn::ReLU>());
            prev = static_cast<size_t>(w);
        }
        gender_disc_->add(std::make_unique<nn::Linear>(prev, 2, init));
    }

    const BackboneConfig& backbone_config() const { return bc_; }
    const HeadsConfig& heads_config() const { return hc_; }
    AlignMode align_mode() const { return align_; }
    Rng& rng() { return rng_; }

    void set_mixstyle_active(bool a) {
        for (auto* m : mixstyle_layers_) m->set_active(a);
    }
    std::vector<nn::MixStyle*>& mixstyle_layers() { return mixstyle_layers_; }

    ForwardOutput forward(const Tensor& x, bool training) {
        if (x.ndim() != 4 || x.dim(1) != 1)
            throw ValidationError("model: expected input shape N x 1 x H x W");
        for (double v : x.data)
            if (!std::isfinite(v)) throw NumericError("model: non-finite value in input");
        ForwardOutput out;
        out.f = backbone_->forward(x, training);
        out.task_logits = task_head_->forward(out.f, training);
        out.p = nn::softmax_rows(out.task_logits);
        cached_ = out;
        return out;
    }

    // Domain branch forward on the cached (f, p). Returns N logits.
    Tensor domain_forward(bool training) {
        Tensor in = align_ == AlignMode::dann ? cached_.f
                                              : multilinear_map(cached_.f, cached_.p);
        return domain_disc_->forward(in, training);
    }

    Tensor gender_forward(bool training) {
        return gender_disc_->forward(cached_.f, training);
    }

    // One fused backward pass. Any gradient pointer may be null (branch not
    // used this step). Discriminators receive their own unreversed loss
    // gradients; the backbone (and, through p, the task head) receives the
    // GRL-scaled adversarial gradients.
    void backward(const Tensor* d_task_logits, const Tensor* d_domain_logits,
                  const Tensor* d_gender_logits, const Tensor* d_f_extra, double lambda_d,
                  double lambda_fair) {
        const size_t n = cached_.f.dim(0);
        const auto d = static_cast<size_t>(bc_.feature_dim);
        const auto k = static_cast<size_t>(hc_.num_classes);
        Tensor g_f({n, d});
        Tensor d_logits({n, k});
        if (d_task_logits) d_logits = *d_task_logits;
        if (d_f_extra)
            for (size_t i = 0; i < g_f.numel(); ++i) g_f.data[i] += d_f_extra->data[i];

        if (d_gender_logits) {
            Tensor g_in = gender_disc_->backward(*d_gender_logits);
            nn::GradReverse grl(lambda_fair);
            g_in = grl.backward(g_in);
            for (size_t i = 0; i < g_f.numel(); ++i) g_f.data[i] += g_in.data[i];
        }

        if (d_domain_logits) {
            Tensor g_in = domain_disc_->backward(*d_domain_logits);
            nn::GradReverse grl(lambda_d);
            g_in = grl.backward(g_in);
            if (align_ == AlignMode::dann) {
                for (size_t i = 0; i < g_f.numel(); ++i) g_f.data[i] += g_in.data[i];
            } else {
                // split gradient of h = f (x) p into f and p components
                Tensor g_p({n, k});
                for (size_t s = 0; s < n; ++s)
                    for (size_t i = 0; i < d; ++i)
                        for (size_t j = 0; j < k; ++j) {
                            const double gh = g_in.data[s * d * k + i * k + j];
                            g_f.data[s * d + i] += gh * cached_.p.data[s * k + j];
                            g_p.data[s * k + j] += gh * cached_.f.data[s * d + i];
                        }
                const Tensor g_logits_adv = nn::softmax_backward(cached_.p, g_p);
                for (size_t i = 0; i < d_logits.numel(); ++i)
                    d_logits.data[i] += g_logits_adv.data[i];
            }
        }

        const Tensor g_f_task = task_head_->backward(d_logits);
        for (size_t i = 0; i < g_f.numel(); ++i) g_f.data[i] += g_f_task.data[i];
        backbone_->backward(g_f);
    }

    std::vector<nn::ParamRef> params() {
        std::vector<nn::ParamRef> out;
        backbone_->collect_params("backbone", out);
        task_head_->collect_params("task_head", out);
        domain_disc_->collect_params("domain_disc", out);
        gender_disc_->collect_params("gender_disc", out);
        return out;
    }

    std::vector<nn::ParamRef> domain_disc_params() {
        std::vector<nn::ParamRef> out;
        domain_disc_->collect_params("domain_disc", out);
        return out;
    }
    std::vector<nn::ParamRef> gender_disc_params() {
        std::vector<nn::ParamRef> out;
        gender_disc_->collect_params("gender_disc", out);
        return out;
    }

    std::vector<nn::BufferRef> buffers() {
        std::vector<nn::BufferRef> out;
        backbone_->collect_buffers("backbone", out);
        return out;
    }

    void zero_grad() {
        auto p = params();
        nn::zero_grads(p);
    }

    nlohmann::json config_json() const {
        return {{"variant",
                 bc_.variant == BackboneConfig::Variant::tiny ? "tiny" : "resnet18"},
                {"feature_dim", bc_.feature_dim},
                {"mixstyle_active", bc_.mixstyle_active},
                {"mixstyle_alpha", bc_.mixstyle_alpha},
                {"mixstyle_p_apply", bc_.mixstyle_p_apply},
                {"num_classes", hc_.num_classes},
                {"domain_widths", hc_.domain_widths},
                {"gender_widths", hc_.gender_widths},
                {"align_mode", to_string(align_)}};
    }

    static FairPDAModel from_config_json(const nlohmann::json& j, uint64_t seed = 0) {
        BackboneConfig bc;
        bc.variant = j.at("variant").get<std::string>() == "tiny"
                         ? BackboneConfig::Variant::tiny
                         : BackboneConfig::Variant::resnet18;
        bc.feature_dim = j.at("feature_dim").get<int>();
        bc.mixstyle_active = j.at("mixstyle_active").get<bool>();
        bc.mixstyle_alpha = j.at("mixstyle_alpha").get<double>();
        bc.mixstyle_p_apply = j.at("mixstyle_p_apply").get<double>();
        HeadsConfig hc;
        hc.num_classes = j.at("num_classes").get<int>();
        hc.domain_widths = j.at("domain_widths").get<std::vector<int>>();
        hc.gender_widths = j.at("gender_widths").get<std::vector<int>>();
        return FairPDAModel(bc, hc, parse_align_mode(j.at("align_mode").get<std::string>()),
                            seed);
    }

    // Checkpoint container: magic "FPDC", u16 version, JSON config echo,
    // then named f64 tensors. Round-trips bit-exactly.
    void save_checkpoint(const std::string& path,
                         const std::map<std::string, Tensor>* extra = nullptr) {
        std::ofstream os(path, std::ios::binary);
        if (!os) throw IoError("cannot open checkpoint for write: " + path);
        os.write("FPDC", 4);
        tensorio::write_raw<uint16_t>(os, 1);
        const std::string cfg = config_json().dump();
        tensorio::write_raw<uint32_t>(os, static_cast<uint32_t>(cfg.size()));
        os.write(cfg.data(), static_cast<long>(cfg.size()));
        std::map<std::string, Tensor> tensors = named_tensors();
        if (extra)
            for (const auto& [name, t] : *extra) tensors["extra." + name] = t;
        tensorio::write_raw<uint32_t>(os, static_cast<uint32_t>(tensors.size()));
        for (const auto& [name, t] : tensors) {
            tensorio::write_raw<uint16_t>(os, static_cast<uint16_t>(name.size()));
            os.write(name.data(), static_cast<long>(name.size()));
            tensorio::write_tensor(os, t, tensorio::kDtypeF64);
        }
        if (!os) throw IoError("checkpoint write failed: " + path);
    }

    static FairPDAModel load_checkpoint(const std::string& path,
                                        std::map<std::string, Tensor>* extra = nullptr) {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw IoError("cannot open checkpoint: " + path);
        char magic[4];
        is.read(magic, 4);
        if (!is || std::memcmp(magic, "FPDC", 4) != 0)
            throw IoError(path + ": not a checkpoint file");
        const auto version = tensorio::read_raw<uint16_t>(is);
        if (version != 1) throw IoError(path + ": unsupported checkpoint version");
        const auto cfg_len = tensorio::read_raw<uint32_t>(is);
        std::string cfg(cfg_len, '\0');
        is.read(cfg.data(), cfg_len);
        FairPDAModel model = from_config_json(nlohmann::json::parse(cfg));
        const auto count = tensorio::read_raw<uint32_t>(is);
        std::map<std::string, Tensor> tensors;
        for (uint32_t i = 0; i < count; ++i) {
            const auto name_len = tensorio::read_raw<uint16_t>(is);
            std::string name(name_len, '\0');
            is.read(name.data(), name_len);
            tensors[name] = tensorio::read_tensor(is);
        }
        model.load_named_tensors(tensors);
        if (extra) {
            for (auto& [name, t] : tensors)
                if (name.rfind("extra.", 0) == 0) (*extra)[name.substr(6)] = std::move(t);
        }
        return model;
    }

    std::map<std::string, Tensor> named_tensors() {
        std::map<std::string, Tensor> out;
        for (auto& p : params()) {
            Tensor t({p.value->size()});
            t.data = *p.value;
            out["param." + p.name] = std::move(t);
        }
        for (auto& b : buffers()) {
            Tensor t({b.value->size()});
            t.data = *b.value;
            out["buffer." + b.name] = std::move(t);
        }
        return out;
    }

    void load_named_tensors(const std::map<std::string, Tensor>& tensors) {
        for (auto& p : params()) {
            auto it = tensors.find("param." + p.name);
            if (it == tensors.end())
                throw IoError("checkpoint missing tensor 'param." + p.name + "'");
            if (it->second.numel() != p.value->size())
                throw IoError("checkpoint tensor size mismatch for '" + p.name + "'");
            *p.value = it->second.data;
        }
        for (auto& b : buffers()) {
            auto it = tensors.find("buffer." + b.name);
            if (it == tensors.end())
                throw IoError("checkpoint missing tensor 'buffer." + b.name + "'");
            *b.value = it->second.data;
        }
    }

private:
    void build_backbone(Rng& init) {
        backbone_ = std::make_unique<nn::Sequential>();
        auto add_mixstyle = [&] {
            auto ms = std::make_unique<nn::MixStyle>(bc_.mixstyle_alpha, bc_.mixstyle_p_apply,
                                                     &rng_);
            ms->set_active(bc_.mixstyle_active);
            mixstyle_layers_.push_back(ms.get());
            backbone_->add(std::move(ms));
        };
        if (bc_.variant == BackboneConfig::Variant::tiny) {
            const size_t d = static_cast<size_t>(bc_.feature_dim);
            const size_t chans[4] = {16, 32, 64, d};
            size_t prev = 1;
            for (int b = 0; b < 4; ++b) {
                backbone_->add(std::make_unique<nn::Conv2d>(prev, chans[b], 3, 2, 1, init));
                backbone_->add(std::make_unique<nn::BatchNorm2d>(chans[b]));
                backbone_->add(std::make_unique<nn::ReLU>());
                if (b == 0 || b == 1) add_mixstyle();
                prev = chans[b];
            }
            backbone_->add(std::make_unique<nn::GlobalAvgPool>());
        } else {
            backbone_->add(std::make_unique<nn::Conv2d>(1, 64, 7, 2, 3, init));
            backbone_->add(std::make_unique<nn::BatchNorm2d>(64));
            backbone_->add(std::make_unique<nn::ReLU>());
            backbone_->add(std::make_unique<nn::MaxPool2d>(3, 2, 1));
            backbone_->add(std::make_unique<nn::BasicBlock>(64, 64, 1, init));
            backbone_->add(std::make_unique<nn::BasicBlock>(64, 64, 1, init));
            add_mixstyle();
            backbone_->add(std::make_unique<nn::BasicBlock>(64, 128, 2, init));
            backbone_->add(std::make_unique<nn::BasicBlock>(128, 128, 1, init));
            add_mixstyle();
            backbone_->add(std::make_unique<nn::BasicBlock>(128, 256, 2, init));
            backbone_->add(std::make_unique<nn::BasicBlock>(256, 256, 1, init));
            backbone_->add(std::make_unique<nn::BasicBlock>(256, 512, 2, init));
            backbone_->add(std::make_unique<nn::BasicBlock>(512, 512, 1, init));
            backbone_->add(std::make_unique<nn::GlobalAvgPool>());
        }
    }

    BackboneConfig bc_;
    HeadsConfig hc_;
    AlignMode align_;
    Rng rng_;
    std::unique_ptr<nn::Sequential> backbone_;
    std::unique_ptr<nn::Linear> task_head_;
    std::unique_ptr<nn::Sequential> domain_disc_;
    std::unique_ptr<nn::Sequential> gender_disc_;
    std::vector<nn::MixStyle*> mixstyle_layers_;
    ForwardOutput cached_;
};

}  // namespace fairpda
