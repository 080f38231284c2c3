#include "fine/diffusion.hpp"

#include <algorithm>
#include <cmath>

#include "fine/errors.hpp"
#include "fine/ops.hpp"

namespace fine {

DiffusionSchedule::DiffusionSchedule(std::size_t steps, double beta_start, double beta_end) {
    if (steps == 0) throw ConfigError("diffusion schedule needs at least one step");
    if (!(beta_start > 0.0) || !(beta_end < 1.0) || !(beta_start <= beta_end)) {
        throw ConfigError("diffusion schedule needs 0 < beta_start <= beta_end < 1");
    }
    beta_.resize(steps);
    alpha_bar_.resize(steps);
    double running = 1.0;
    for (std::size_t t = 0; t < steps; ++t) {
        const double frac = steps == 1 ? 0.0 : static_cast<double>(t) / static_cast<double>(steps - 1);
        beta_[t] = beta_start + (beta_end - beta_start) * frac;
        running *= 1.0 - beta_[t];
        alpha_bar_[t] = running;
    }
}

namespace {

void check_timestep(int t, const DiffusionSchedule& sched) {
    if (t < 0 || static_cast<std::size_t>(t) >= sched.steps()) {
        throw ContractError("timestep " + std::to_string(t) + " outside [0, " + std::to_string(sched.steps()) + ")");
    }
}

}  // namespace

Tensor q_sample(const Tensor& z0, int t, const Tensor& eps, const DiffusionSchedule& sched) {
    if (z0.shape() != eps.shape()) {
        throw DimensionError("q_sample: data " + shape_str(z0.shape()) + " vs noise " + shape_str(eps.shape()));
    }
    check_timestep(t, sched);
    const double a = std::sqrt(sched.alpha_bar(static_cast<std::size_t>(t)));
    const double b = std::sqrt(1.0 - sched.alpha_bar(static_cast<std::size_t>(t)));
    Tensor out(z0.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a * z0[i] + b * eps[i];
    return out;
}

Tensor q_sample(const Tensor& z0, std::span<const int> t, const Tensor& eps, const DiffusionSchedule& sched) {
    if (z0.shape() != eps.shape()) {
        throw DimensionError("q_sample: data " + shape_str(z0.shape()) + " vs noise " + shape_str(eps.shape()));
    }
    if (z0.rank() == 0 || z0.dim(0) != t.size()) {
        throw DimensionError("q_sample: " + std::to_string(t.size()) + " timesteps for batch " + shape_str(z0.shape()));
    }
    const std::size_t per = z0.numel() / t.size();
    Tensor out(z0.shape());
    for (std::size_t i = 0; i < t.size(); ++i) {
        check_timestep(t[i], sched);
        const double a = std::sqrt(sched.alpha_bar(static_cast<std::size_t>(t[i])));
        const double b = std::sqrt(1.0 - sched.alpha_bar(static_cast<std::size_t>(t[i])));
        for (std::size_t j = i * per; j < (i + 1) * per; ++j) out[j] = a * z0[j] + b * eps[j];
    }
    return out;
}

NoiseDraw draw_noise(const Shape& batch_shape, std::span<const int> class_ids, const DiffusionSchedule& sched,
                     Rng& rng, double drop_probability) {
    const std::size_t n = batch_shape.at(0);
    if (class_ids.size() != n) {
        throw ContractError("draw_noise: " + std::to_string(class_ids.size()) + " class ids for batch of " +
                            std::to_string(n));
    }
    NoiseDraw draw;
    draw.t.resize(n);
    draw.class_ids.assign(class_ids.begin(), class_ids.end());
    for (std::size_t i = 0; i < n; ++i) draw.t[i] = static_cast<int>(rng.below(sched.steps()));
    for (std::size_t i = 0; i < n; ++i) {
        if (rng.uniform() < drop_probability) draw.class_ids[i] = kUnconditional;
    }
    draw.eps = Tensor(batch_shape);
    for (double& v : draw.eps.data()) v = rng.normal();
    return draw;
}

Tensor ddpm_loss(const NoisePredictor& model, const Tensor& z0, const NoiseDraw& noise, const DiffusionSchedule& sched) {
    const Tensor z_t = q_sample(z0, noise.t, noise.eps, sched);
    return ops::mse(model.predict_noise(z_t, noise.t, noise.class_ids), noise.eps);
}

Tensor ddpm_loss(const NoisePredictor& model, const Tensor& z0, std::span<const int> class_ids,
                 const DiffusionSchedule& sched, Rng& rng, double drop_probability) {
    const NoiseDraw noise = draw_noise(z0.shape(), class_ids, sched, rng, drop_probability);
    return ddpm_loss(model, z0, noise, sched);
}

Tensor sample(const NoisePredictor& model, const DiffusionSchedule& sched, std::size_t n, int class_id, Rng& rng,
              std::size_t chunk) {
    NoGradScope no_grad;
    const Shape item = model.sample_shape();
    const std::size_t per = shape_numel(item);
    Tensor out(Shape{n, item[0], item[1], item[2]});
    if (chunk == 0) chunk = n;
    for (std::size_t start = 0; start < n; start += chunk) {
        const std::size_t count = std::min(chunk, n - start);
        Tensor z(Shape{count, item[0], item[1], item[2]});
        for (double& v : z.data()) v = rng.normal();
        const std::vector<int> classes(count, class_id);
        std::vector<int> ts(count);
        for (std::size_t step = sched.steps(); step-- > 0;) {
            std::fill(ts.begin(), ts.end(), static_cast<int>(step));
            const Tensor eps = model.predict_noise(z, ts, classes);
            const double beta = sched.beta(step);
            const double coef = beta / std::sqrt(1.0 - sched.alpha_bar(step));
            const double inv_sqrt_alpha = 1.0 / std::sqrt(sched.alpha(step));
            const double noise_sd = step > 0 ? std::sqrt(beta) : 0.0;
            Tensor next(z.shape());
            for (std::size_t i = 0; i < z.numel(); ++i) {
                next[i] = inv_sqrt_alpha * (z[i] - coef * eps[i]);
                if (step > 0) next[i] += noise_sd * rng.normal();
            }
            z = next;
        }
        std::copy(z.data().begin(), z.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(start * per));
    }
    return out;
}

EmaModel::EmaModel(const std::vector<NamedTensor>& params, double decay) : decay_(decay) {
    if (!(decay >= 0.0 && decay <= 1.0)) throw ConfigError("EMA decay must lie in [0, 1]");
    shadow_.reserve(params.size());
    for (const NamedTensor& p : params) {
        Tensor copy = p.tensor.clone();
        copy.set_requires_grad(false);
        shadow_.push_back({p.name, copy});
    }
}

void EmaModel::check_structure(const std::vector<NamedTensor>& params) const {
    if (params.size() != shadow_.size()) {
        throw ContractError("EMA structure mismatch: " + std::to_string(shadow_.size()) + " shadow tensors vs " +
                            std::to_string(params.size()) + " parameters");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i].name != shadow_[i].name || params[i].tensor.shape() != shadow_[i].tensor.shape()) {
            throw ContractError("EMA structure mismatch at '" + shadow_[i].name + "' vs '" + params[i].name + "'");
        }
    }
}

void EmaModel::update(const std::vector<NamedTensor>& params) {
    check_structure(params);
    const double keep = decay_;
    const double take = 1.0 - decay_;
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto s = shadow_[i].tensor.data();
        auto p = params[i].tensor.data();
        for (std::size_t j = 0; j < s.size(); ++j) s[j] = keep * s[j] + take * p[j];
    }
}

void EmaModel::copy_to(const std::vector<NamedTensor>& params) const {
    check_structure(params);
    for (std::size_t i = 0; i < params.size(); ++i) {
        std::copy(shadow_[i].tensor.data().begin(), shadow_[i].tensor.data().end(),
                  params[i].tensor.impl()->data.begin());
    }
}

}  // namespace fine
