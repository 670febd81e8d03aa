#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "fairpda/common.hpp"
#include "fairpda/tensor.hpp"

namespace fairpda::nn {

using MatrixRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatrixRM>;
using ConstMapRM = Eigen::Map<const MatrixRM>;

struct ParamRef {
    std::string name;
    std::vector<double>* value;
    std::vector<double>* grad;
};

struct BufferRef {
    std::string name;
    std::vector<double>* value;
};

class Layer {
public:
    virtual ~Layer() = default;
    virtual Tensor forward(const Tensor& x, bool training) = 0;
    virtual Tensor backward(const Tensor& grad_out) = 0;
    virtual void collect_params(const std::string& prefix, std::vector<ParamRef>& out) {
        (void)prefix;
        (void)out;
    }
    virtual void collect_buffers(const std::string& prefix, std::vector<BufferRef>& out) {
        (void)prefix;
        (void)out;
    }
};

inline void kaiming_init(std::vector<double>& w, size_t fan_in, Rng& rng) {
    const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (auto& v : w) v = rng.normal(0.0, sd);
}

class Linear : public Layer {
public:
    Linear(size_t in, size_t out, Rng& rng) : in_(in), out_(out) {
        w_.assign(in * out, 0.0);
        b_.assign(out, 0.0);
        gw_.assign(in * out, 0.0);
        gb_.assign(out, 0.0);
        kaiming_init(w_, in, rng);
    }

    Tensor forward(const Tensor& x, bool) override {
        if (x.ndim() != 2 || x.dim(1) != in_)
            throw ValidationError("linear: input shape mismatch");
        x_ = x;
        const size_t n = x.dim(0);
        Tensor y({n, out_});
        ConstMapRM xm(x.data.data(), static_cast<long>(n), static_cast<long>(in_));
        ConstMapRM wm(w_.data(), static_cast<long>(out_), static_cast<long>(in_));
        MapRM ym(y.data.data(), static_cast<long>(n), static_cast<long>(out_));
        ym.noalias() = xm * wm.transpose();
        for (size_t i = 0; i < n; ++i)
            for (size_t j = 0; j < out_; ++j) y.data[i * out_ + j] += b_[j];
        return y;
    }

    Tensor backward(const Tensor& gy) override {
        const size_t n = gy.dim(0);
        ConstMapRM gym(gy.data.data(), static_cast<long>(n), static_cast<long>(out_));
        ConstMapRM xm(x_.data.data(), static_cast<long>(n), static_cast<long>(in_));
        ConstMapRM wm(w_.data(), static_cast<long>(out_), static_cast<long>(in_));
        MapRM gwm(gw_.data(), static_cast<long>(out_), static_cast<long>(in_));
        gwm.noalias() += gym.transpose() * xm;
        for (size_t i = 0; i < n; ++i)
            for (size_t j = 0; j < out_; ++j) gb_[j] += gy.data[i * out_ + j];
        Tensor gx({n, in_});
        MapRM gxm(gx.data.data(), static_cast<long>(n), static_cast<long>(in_));
        gxm.noalias() = gym * wm;
        return gx;
    }

    void collect_params(const std::string& p, std::vector<ParamRef>& out) override {
        out.push_back({p + ".weight", &w_, &gw_});
        out.push_back({p + ".bias", &b_, &gb_});
    }

private:
    size_t in_, out_;
    std::vector<double> w_, b_, gw_, gb_;
    Tensor x_;
};

class ReLU : public Layer {
public:
    Tensor forward(const Tensor& x, bool) override {
        mask_.assign(x.numel(), 0);
        Tensor y = x;
        for (size_t i = 0; i < y.numel(); ++i) {
            if (y.data[i] > 0.0)
                mask_[i] = 1;
            else
                y.data[i] = 0.0;
        }
        return y;
    }
    Tensor backward(const Tensor& gy) override {
        Tensor gx = gy;
        for (size_t i = 0; i < gx.numel(); ++i)
            if (!mask_[i]) gx.data[i] = 0.0;
        return gx;
    }

private:
    std::vector<uint8_t> mask_;
};

class Tanh : public Layer {
public:
    Tensor forward(const Tensor& x, bool) override {
        y_ = x;
        for (auto& v : y_.data) v = std::tanh(v);
        return y_;
    }
    Tensor backward(const Tensor& gy) override {
        Tensor gx = gy;
        for (size_t i = 0; i < gx.numel(); ++i)
            gx.data[i] *= 1.0 - y_.data[i] * y_.data[i];
        return gx;
    }

private:
    Tensor y_;
};

class Conv2d : public Layer {
public:
    Conv2d(size_t in_ch, size_t out_ch, size_t kernel, size_t stride, size_t pad, Rng& rng)
        : ci_(in_ch), co_(out_ch), k_(kernel), s_(stride), p_(pad) {
        w_.assign(co_ * ci_ * k_ * k_, 0.0);
        b_.assign(co_, 0.0);
        gw_.assign(w_.size(), 0.0);
        gb_.assign(co_, 0.0);
        kaiming_init(w_, ci_ * k_ * k_, rng);
    }

    Tensor forward(const Tensor& x, bool) override {
        if (x.ndim() != 4 || x.dim(1) != ci_)
            throw ValidationError("conv2d: input shape mismatch");
        x_ = x;
        const size_t n = x.dim(0), h = x.dim(2), w = x.dim(3);
        ho_ = (h + 2 * p_ - k_) / s_ + 1;
        wo_ = (w + 2 * p_ - k_) / s_ + 1;
        Tensor y({n, co_, ho_, wo_});
        MatrixRM cols(static_cast<long>(ci_ * k_ * k_), static_cast<long>(ho_ * wo_));
        ConstMapRM wm(w_.data(), static_cast<long>(co_), static_cast<long>(ci_ * k_ * k_));
        for (size_t ni = 0; ni < n; ++ni) {
            im2col(x, ni, cols);
            MapRM ym(&y.data[ni * co_ * ho_ * wo_], static_cast<long>(co_),
                     static_cast<long>(ho_ * wo_));
            ym.noalias() = wm * cols;
            for (size_t c = 0; c < co_; ++c)
                for (size_t i = 0; i < ho_ * wo_; ++i)
                    y.data[(ni * co_ + c) * ho_ * wo_ + i] += b_[c];
        }
        return y;
    }

    Tensor backward(const Tensor& gy) override {
        const size_t n = x_.dim(0), h = x_.dim(2), w = x_.dim(3);
        Tensor gx(x_.dims);
        MatrixRM cols(static_cast<long>(ci_ * k_ * k_), static_cast<long>(ho_ * wo_));
        MatrixRM dcols(static_cast<long>(ci_ * k_ * k_), static_cast<long>(ho_ * wo_));
        ConstMapRM wm(w_.data(), static_cast<long>(co_), static_cast<long>(ci_ * k_ * k_));
        MapRM gwm(gw_.data(), static_cast<long>(co_), static_cast<long>(ci_ * k_ * k_));
        for (size_t ni = 0; ni < n; ++ni) {
            im2col(x_, ni, cols);
            ConstMapRM gym(&gy.data[ni * co_ * ho_ * wo_], static_cast<long>(co_),
                           static_cast<long>(ho_ * wo_));
            gwm.noalias() += gym * cols.transpose();
            for (size_t c = 0; c < co_; ++c)
                for (size_t i = 0; i < ho_ * wo_; ++i)
                    gb_[c] += gy.data[(ni * co_ + c) * ho_ * wo_ + i];
            dcols.noalias() = wm.transpose() * gym;
            // col2im accumulate
            for (size_t c = 0; c < ci_; ++c)
                for (size_t kh = 0; kh < k_; ++kh)
                    for (size_t kw = 0; kw < k_; ++kw) {
                        const size_t row = (c * k_ + kh) * k_ + kw;
                        for (size_t oh = 0; oh < ho_; ++oh) {
                            const long ih = static_cast<long>(oh * s_ + kh) -
                                            static_cast<long>(p_);
                            if (ih < 0 || ih >= static_cast<long>(h)) continue;
                            for (size_t ow = 0; ow < wo_; ++ow) {
                                const long iw = static_cast<long>(ow * s_ + kw) -
                                                static_cast<long>(p_);
                                if (iw < 0 || iw >= static_cast<long>(w)) continue;
                                gx.at4(ni, c, static_cast<size_t>(ih),
                                       static_cast<size_t>(iw)) +=
                                    dcols(static_cast<long>(row),
                                          static_cast<long>(oh * wo_ + ow));
                            }
                        }
                    }
        }
        return gx;
    }

    void collect_params(const std::string& p, std::vector<ParamRef>& out) override {
        out.push_back({p + ".weight", &w_, &gw_});
        out.push_back({p + ".bias", &b_, &gb_});
    }

private:
    void im2col(const Tensor& x, size_t ni, MatrixRM& cols) const {
        const size_t h = x.dim(2), w = x.dim(3);
        for (size_t c = 0; c < ci_; ++c)
            for (size_t kh = 0; kh < k_; ++kh)
                for (size_t kw = 0; kw < k_; ++kw) {
                    const size_t row = (c * k_ + kh) * k_ + kw;
                    for (size_t oh = 0; oh < ho_; ++oh) {
                        const long ih =
                            static_cast<long>(oh * s_ + kh) - static_cast<long>(p_);
                        for (size_t ow = 0; ow < wo_; ++ow) {
                            const long iw =
                                static_cast<long>(ow * s_ + kw) - static_cast<long>(p_);
                            double v = 0.0;
                            if (ih >= 0 && ih < static_cast<long>(h) && iw >= 0 &&
                                iw < static_cast<long>(w))
                                v = x.at4(ni, c, static_cast<size_t>(ih),
                                          static_cast<size_t>(iw));
                            cols(static_cast<long>(row),
                                 static_cast<long>(oh * wo_ + ow)) = v;
                        }
                    }
                }
    }

    size_t ci_, co_, k_, s_, p_;
    size_t ho_ = 0, wo_ = 0;
    std::vector<double> w_, b_, gw_, gb_;
    Tensor x_;
};

class BatchNorm2d : public Layer {
public:
    explicit BatchNorm2d(size_t channels, double eps = 1e-5, double momentum = 0.1)
        : c_(channels), eps_(eps), momentum_(momentum) {
        gamma_.assign(c_, 1.0);
        beta_.assign(c_, 0.0);
        ggamma_.assign(c_, 0.0);
        gbeta_.assign(c_, 0.0);
        running_mean_.assign(c_, 0.0);
        running_var_.assign(c_, 1.0);
    }

    Tensor forward(const Tensor& x, bool training) override {
        if (x.ndim() != 4 || x.dim(1) != c_)
            throw ValidationError("batchnorm: input shape mismatch");
        training_ = training;
        const size_t n = x.dim(0), h = x.dim(2), w = x.dim(3);
        const size_t m = n * h * w;
        Tensor y(x.dims);
        xhat_ = Tensor(x.dims);
        invstd_.assign(c_, 0.0);
        for (size_t c = 0; c < c_; ++c) {
            double mean, var;
            if (training) {
                double s = 0.0, s2 = 0.0;
                for (size_t ni = 0; ni < n; ++ni)
                    for (size_t i = 0; i < h * w; ++i) {
                        const double v = x.data[(ni * c_ + c) * h * w + i];
                        s += v;
                        s2 += v * v;
                    }
                mean = s / static_cast<double>(m);
                var = s2 / static_cast<double>(m) - mean * mean;
                if (var < 0.0) var = 0.0;
                running_mean_[c] = (1.0 - momentum_) * running_mean_[c] + momentum_ * mean;
                running_var_[c] = (1.0 - momentum_) * running_var_[c] + momentum_ * var;
            } else {
                mean = running_mean_[c];
                var = running_var_[c];
            }
            const double inv = 1.0 / std::sqrt(var + eps_);
            invstd_[c] = inv;
            for (size_t ni = 0; ni < n; ++ni)
                for (size_t i = 0; i < h * w; ++i) {
                    const size_t idx = (ni * c_ + c) * h * w + i;
                    const double xh = (x.data[idx] - mean) * inv;
                    xhat_.data[idx] = xh;
                    y.data[idx] = gamma_[c] * xh + beta_[c];
                }
        }
        return y;
    }

    Tensor backward(const Tensor& gy) override {
        const size_t n = gy.dim(0), h = gy.dim(2), w = gy.dim(3);
        const auto m = static_cast<double>(n * h * w);
        Tensor gx(gy.dims);
        for (size_t c = 0; c < c_; ++c) {
            double sum_gy = 0.0, sum_gy_xhat = 0.0;
            for (size_t ni = 0; ni < n; ++ni)
                for (size_t i = 0; i < h * w; ++i) {
                    const size_t idx = (ni * c_ + c) * h * w + i;
                    sum_gy += gy.data[idx];
                    sum_gy_xhat += gy.data[idx] * xhat_.data[idx];
                }
            ggamma_[c] += sum_gy_xhat;
            gbeta_[c] += sum_gy;
            for (size_t ni = 0; ni < n; ++ni)
                for (size_t i = 0; i < h * w; ++i) {
                    const size_t idx = (ni * c_ + c) * h * w + i;
                    if (training_) {
                        gx.data[idx] = gamma_[c] * invstd_[c] / m *
                                       (m * gy.data[idx] - sum_gy -
                                        xhat_.data[idx] * sum_gy_xhat);
                    } else {
                        gx.data[idx] = gamma_[c] * invstd_[c] * gy.data[idx];
                    }
                }
        }
        return gx;
    }

    void collect_params(const std::string& p, std::vector<ParamRef>& out) override {
        out.push_back({p + ".gamma", &gamma_, &ggamma_});
        out.push_back({p + ".beta", &beta_, &gbeta_});
    }
    void collect_buffers(const std::string& p, std::vector<BufferRef>& out) override {
        out.push_back({p + ".running_mean", &running_mean_});
        out.push_back({p + ".running_var", &running_var_});
    }

private:
    size_t c_;
    double eps_, momentum_;
    bool training_ = true;
    std::vector<double> gamma_, beta_, ggamma_, gbeta_;
    std::vector<double> running_mean_, running_var_, invstd_;
    Tensor xhat_;
};

class MaxPool2d : public Layer {
public:
    MaxPool2d(size_t kernel, size_t stride, size_t pad) : k_(kernel), s_(stride), p_(pad) {}

    Tensor forward(const Tensor& x, bool) override {
        const size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
        in_dims_ = x.dims;
        const size_t ho = (h + 2 * p_ - k_) / s_ + 1;
        const size_t wo = (w + 2 * p_ - k_) / s_ + 1;
        Tensor y({n, c, ho, wo});
        argmax_.assign(y.numel(), 0);
        for (size_t ni = 0; ni < n; ++ni)
            for (size_t ci = 0; ci < c; ++ci)
                for (size_t oh = 0; oh < ho; ++oh)
                    for (size_t ow = 0; ow < wo; ++ow) {
                        double best = -1e300;
                        size_t best_idx = 0;
                        for (size_t kh = 0; kh < k_; ++kh)
                            for (size_t kw = 0; kw < k_; ++kw) {
                                const long ih = static_cast<long>(oh * s_ + kh) -
                                                static_cast<long>(p_);
                                const long iw = static_cast<long>(ow * s_ + kw) -
                                                static_cast<long>(p_);
                                if (ih < 0 || ih >= static_cast<long>(h) || iw < 0 ||
                                    iw >= static_cast<long>(w))
                                    continue;
                                const size_t idx =
                                    ((ni * c + ci) * h + static_cast<size_t>(ih)) * w +
                                    static_cast<size_t>(iw);
                                if (x.data[idx] > best) {
                                    best = x.data[idx];
                                    best_idx = idx;
                                }
                            }
                        const size_t oidx = ((ni * c + ci) * ho + oh) * wo + ow;
                        y.data[oidx] = best;
                        argmax_[oidx] = best_idx;
                    }
        return y;
    }

    Tensor backward(const Tensor& gy) override {
        Tensor gx(in_dims_);
        for (size_t i = 0; i < gy.numel(); ++i) gx.data[argmax_[i]] += gy.data[i];
        return gx;
    }

private:
    size_t k_, s_, p_;
    std::vector<size_t> in_dims_;
    std::vector<size_t> argmax_;
};

class GlobalAvgPool : public Layer {
public:
    Tensor forward(const Tensor& x, bool) override {
        const size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
        in_dims_ = x.dims;
        Tensor y({n, c});
        for (size_t ni = 0; ni < n; ++ni)
            for (size_t ci = 0; ci < c; ++ci) {
                double s = 0.0;
                for (size_t i = 0; i < h * w; ++i) s += x.data[(ni * c + ci) * h * w + i];
                y.data[ni * c + ci] = s / static_cast<double>(h * w);
            }
        return y;
    }
    Tensor backward(const Tensor& gy) override {
        const size_t n = in_dims_[0], c = in_dims_[1], h = in_dims_[2], w = in_dims_[3];
        Tensor gx(in_dims_);
        for (size_t ni = 0; ni < n; ++ni)
            for (size_t ci = 0; ci < c; ++ci) {
                const double g = gy.data[ni * c + ci] / static_cast<double>(h * w);
                for (size_t i = 0; i < h * w; ++i) gx.data[(ni * c + ci) * h * w + i] = g;
            }
        return gx;
    }

private:
    std::vector<size_t> in_dims_;
};

// Style-statistics mixing. Per-sample per-channel mean/std over spatial
// dims; statistics are treated as constants in the backward pass, matching
// the reference formulation, so the gradient is a per-(sample,channel)
// rescaling.
class MixStyle : public Layer {
public:
    MixStyle(double alpha, double p_apply, Rng* rng)
        : alpha_(alpha), p_apply_(p_apply), rng_(rng) {}

    void set_active(bool a) { active_ = a; }

    // test hooks: force the mixing coefficient and/or the partner permutation
    void force_lambda(double l) { forced_lambda_ = l; }
    void force_permutation(std::vector<size_t> p) { forced_perm_ = std::move(p); }
    void clear_forcing() {
        forced_lambda_.reset();
        forced_perm_.reset();
    }

    Tensor forward(const Tensor& x, bool training) override {
        const size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
        applied_ = false;
        if (!training || !active_ || n < 2) return x;
        const bool apply = forced_lambda_ || forced_perm_ ? true : rng_->bernoulli(p_apply_);
        if (!apply) return x;
        applied_ = true;

        const size_t hw = h * w;
        std::vector<double> mu(n * c), sig(n * c);
        for (size_t ni = 0; ni < n; ++ni)
            for (size_t ci = 0; ci < c; ++ci) {
                double s = 0.0, s2 = 0.0;
                for (size_t i = 0; i < hw; ++i) {
                    const double v = x.data[(ni * c + ci) * hw + i];
                    s += v;
                    s2 += v * v;
                }
                const double m = s / static_cast<double>(hw);
                double var = s2 / static_cast<double>(hw) - m * m;
                if (var < 0.0) var = 0.0;
                mu[ni * c + ci] = m;
                sig[ni * c + ci] = std::sqrt(var + kEps);
            }

        std::vector<size_t> perm(n);
        if (forced_perm_) {
            perm = *forced_perm_;
        } else {
            for (size_t i = 0; i < n; ++i) perm[i] = i;
            rng_->shuffle(perm);
        }
        std::vector<double> lambda(n);
        for (size_t i = 0; i < n; ++i)
            lambda[i] = forced_lambda_ ? *forced_lambda_ : rng_->beta(alpha_, alpha_);

        Tensor y(x.dims);
        ratio_.assign(n * c, 1.0);
        for (size_t ni = 0; ni < n; ++ni) {
            const size_t pi = perm[ni];
            for (size_t ci = 0; ci < c; ++ci) {
                const double mu_mix =
                    lambda[ni] * mu[ni * c + ci] + (1.0 - lambda[ni]) * mu[pi * c + ci];
                const double sig_mix =
                    lambda[ni] * sig[ni * c + ci] + (1.0 - lambda[ni]) * sig[pi * c + ci];
                const double scale = sig_mix / sig[ni * c + ci];
                ratio_[ni * c + ci] = scale;
                for (size_t i = 0; i < hw; ++i) {
                    const size_t idx = (ni * c + ci) * hw + i;
                    y.data[idx] = scale * (x.data[idx] - mu[ni * c + ci]) + mu_mix;
                }
            }
        }
        return y;
    }

    Tensor backward(const Tensor& gy) override {
        if (!applied_) return gy;
        const size_t n = gy.dim(0), c = gy.dim(1), hw = gy.dim(2) * gy.dim(3);
        Tensor gx = gy;
        for (size_t ni = 0; ni < n; ++ni)
            for (size_t ci = 0; ci < c; ++ci) {
                const double r = ratio_[ni * c + ci];
                for (size_t i = 0; i < hw; ++i) gx.data[(ni * c + ci) * hw + i] *= r;
            }
        return gx;
    }

    static constexpr double kEps = 1e-6;

private:
    double alpha_, p_apply_;
    Rng* rng_;
    bool active_ = true;
    bool applied_ = false;
    std::vector<double> ratio_;
    std::optional<double> forced_lambda_;
    std::optional<std::vector<size_t>> forced_perm_;
};

class Sequential : public Layer {
public:
    void add(std::unique_ptr<Layer> l) { layers_.push_back(std::move(l)); }
    Layer& layer(size_t i) { return *layers_[i]; }
    size_t size() const { return layers_.size(); }

    Tensor forward(const Tensor& x, bool training) override {
        Tensor y = x;
        for (auto& l : layers_) y = l->forward(y, training);
        return y;
    }
    Tensor backward(const Tensor& gy) override {
        Tensor g = gy;
        for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = (*it)->backward(g);
        return g;
    }
    void collect_params(const std::string& p, std::vector<ParamRef>& out) override {
        for (size_t i = 0; i < layers_.size(); ++i)
            layers_[i]->collect_params(p + "." + std::to_string(i), out);
    }
    void collect_buffers(const std::string& p, std::vector<BufferRef>& out) override {
        for (size_t i = 0; i < layers_.size(); ++i)
            layers_[i]->collect_buffers(p + "." + std::to_string(i), out);
    }

private:
    std::vector<std::unique_ptr<Layer>> layers_;
};

// conv3x3-bn-relu x2 with identity (or 1x1 projection) shortcut
class BasicBlock : public Layer {
public:
    BasicBlock(size_t in_ch, size_t out_ch, size_t stride, Rng& rng)
        : conv1_(in_ch, out_ch, 3, stride, 1, rng),
          bn1_(out_ch),
          conv2_(out_ch, out_ch, 3, 1, 1, rng),
          bn2_(out_ch) {
        if (stride != 1 || in_ch != out_ch) {
            proj_conv_ = std::make_unique<Conv2d>(in_ch, out_ch, 1, stride, 0, rng);
            proj_bn_ = std::make_unique<BatchNorm2d>(out_ch);
        }
    }

    Tensor forward(const Tensor& x, bool training) override {
        Tensor main = bn1_.forward(conv1_.forward(x, training), training);
        relu1_mask_.assign(main.numel(), 0);
        for (size_t i = 0; i < main.numel(); ++i) {
            if (main.data[i] > 0.0)
                relu1_mask_[i] = 1;
            else
                main.data[i] = 0.0;
        }
        main = bn2_.forward(conv2_.forward(main, training), training);
        Tensor shortcut = proj_conv_
                              ? proj_bn_->forward(proj_conv_->forward(x, training), training)
                              : x;
        Tensor y(main.dims);
        relu2_mask_.assign(y.numel(), 0);
        for (size_t i = 0; i < y.numel(); ++i) {
            const double v = main.data[i] + shortcut.data[i];
            if (v > 0.0) {
                y.data[i] = v;
                relu2_mask_[i] = 1;
            }
        }
        return y;
    }

    Tensor backward(const Tensor& gy) override {
        Tensor g = gy;
        for (size_t i = 0; i < g.numel(); ++i)
            if (!relu2_mask_[i]) g.data[i] = 0.0;
        Tensor g_main = conv2_.backward(bn2_.backward(g));
        for (size_t i = 0; i < g_main.numel(); ++i)
            if (!relu1_mask_[i]) g_main.data[i] = 0.0;
        Tensor gx = conv1_.backward(bn1_.backward(g_main));
        if (proj_conv_) {
            Tensor g_short = proj_conv_->backward(proj_bn_->backward(g));
            for (size_t i = 0; i < gx.numel(); ++i) gx.data[i] += g_short.data[i];
        } else {
            for (size_t i = 0; i < gx.numel(); ++i) gx.data[i] += g.data[i];
        }
        return gx;
    }

    void collect_params(const std::string& p, std::vector<ParamRef>& out) override {
        conv1_.collect_params(p + ".conv1", out);
        bn1_.collect_params(p + ".bn1", out);
        conv2_.collect_params(p + ".conv2", out);
        bn2_.collect_params(p + ".bn2", out);
        if (proj_conv_) {
            proj_conv_->collect_params(p + ".proj_conv", out);
            proj_bn_->collect_params(p + ".proj_bn", out);
        }
    }
    void collect_buffers(const std::string& p, std::vector<BufferRef>& out) override {
        bn1_.collect_buffers(p + ".bn1", out);
        bn2_.collect_buffers(p + ".bn2", out);
        if (proj_bn_) proj_bn_->collect_buffers(p + ".proj_bn", out);
    }

private:
    Conv2d conv1_;
    BatchNorm2d bn1_;
    Conv2d conv2_;
    BatchNorm2d bn2_;
    std::unique_ptr<Conv2d> proj_conv_;
    std::unique_ptr<BatchNorm2d> proj_bn_;
    std::vector<uint8_t> relu1_mask_, relu2_mask_;
};

// Gradient reversal: identity forward, -lambda scaling backward. Stateless
// apart from the coefficient, which the trainer updates per step.
class GradReverse {
public:
    explicit GradReverse(double lambda = 1.0) : lambda_(lambda) {}
    void set_lambda(double l) {
        if (l < 0.0) throw ValidationError("grl: lambda must be >= 0");
        lambda_ = l;
    }
    double lambda() const { return lambda_; }
    Tensor forward(const Tensor& x) const { return x; }
    Tensor backward(const Tensor& gy) const {
        Tensor gx = gy;
        for (auto& v : gx.data) v *= -lambda_;
        return gx;
    }

private:
    double lambda_;
};

inline Tensor softmax_rows(const Tensor& logits) {
    const size_t n = logits.dim(0), k = logits.dim(1);
    Tensor p(logits.dims);
    for (size_t i = 0; i < n; ++i) {
        double mx = -1e300;
        for (size_t j = 0; j < k; ++j) mx = std::max(mx, logits.data[i * k + j]);
        double z = 0.0;
        for (size_t j = 0; j < k; ++j) {
            p.data[i * k + j] = std::exp(logits.data[i * k + j] - mx);
            z += p.data[i * k + j];
        }
        for (size_t j = 0; j < k; ++j) p.data[i * k + j] /= z;
    }
    return p;
}

// d(loss)/d(logits) given d(loss)/d(softmax probs)
inline Tensor softmax_backward(const Tensor& probs, const Tensor& gp) {
    const size_t n = probs.dim(0), k = probs.dim(1);
    Tensor gl(probs.dims);
    for (size_t i = 0; i < n; ++i) {
        double dot = 0.0;
        for (size_t j = 0; j < k; ++j) dot += gp.data[i * k + j] * probs.data[i * k + j];
        for (size_t j = 0; j < k; ++j)
            gl.data[i * k + j] = probs.data[i * k + j] * (gp.data[i * k + j] - dot);
    }
    return gl;
}

// Momentum-free adaptive optimizer (RMSProp).
class RmsProp {
public:
    explicit RmsProp(double lr = 1e-3, double rho = 0.99, double eps = 1e-8)
        : lr_(lr), rho_(rho), eps_(eps) {}

    void step(std::vector<ParamRef>& params) {
        if (v_.empty()) {
            for (auto& p : params) v_.emplace_back(p.value->size(), 0.0);
        }
        for (size_t i = 0; i < params.size(); ++i) {
            auto& val = *params[i].value;
            auto& grad = *params[i].grad;
            auto& v = v_[i];
            for (size_t j = 0; j < val.size(); ++j) {
                v[j] = rho_ * v[j] + (1.0 - rho_) * grad[j] * grad[j];
                val[j] -= lr_ * grad[j] / (std::sqrt(v[j]) + eps_);
            }
        }
    }

    std::vector<std::vector<double>>& state() { return v_; }
    double lr() const { return lr_; }

private:
    double lr_, rho_, eps_;
    std::vector<std::vector<double>> v_;
};

inline void zero_grads(std::vector<ParamRef>& params) {
    for (auto& p : params) std::fill(p.grad->begin(), p.grad->end(), 0.0);
}

}  // namespace fairpda::nn
