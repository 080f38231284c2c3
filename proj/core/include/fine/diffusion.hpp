#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "fine/dit.hpp"
#include "fine/rng.hpp"
#include "fine/tensor.hpp"

namespace fine {

// Linear beta schedule with cumulative alpha products.
class DiffusionSchedule {
public:
    explicit DiffusionSchedule(std::size_t steps = 400, double beta_start = 1e-4, double beta_end = 2e-2);

    std::size_t steps() const { return beta_.size(); }
    double beta(std::size_t t) const { return beta_.at(t); }
    double alpha(std::size_t t) const { return 1.0 - beta_.at(t); }
    double alpha_bar(std::size_t t) const { return alpha_bar_.at(t); }
    double beta_start() const { return beta_.front(); }
    double beta_end() const { return beta_.back(); }

private:
    std::vector<double> beta_;
    std::vector<double> alpha_bar_;
};

// sqrt(abar_t) z0 + sqrt(1 - abar_t) eps, one timestep for the whole tensor.
Tensor q_sample(const Tensor& z0, int t, const Tensor& eps, const DiffusionSchedule& sched);
// Per-image timesteps for a batch [n x ...].
Tensor q_sample(const Tensor& z0, std::span<const int> t, const Tensor& eps, const DiffusionSchedule& sched);

// The random part of one loss evaluation, drawn up front so it can be pinned.
struct NoiseDraw {
    std::vector<int> t;
    std::vector<int> class_ids;  // after condition dropout
    Tensor eps;
};

inline constexpr double kClassDropProbability = 0.1;

NoiseDraw draw_noise(const Shape& batch_shape, std::span<const int> class_ids, const DiffusionSchedule& sched,
                     Rng& rng, double drop_probability = kClassDropProbability);

// mean || eps - eps_theta(z_t | c, t) ||^2 over every element.
Tensor ddpm_loss(const NoisePredictor& model, const Tensor& z0, const NoiseDraw& noise, const DiffusionSchedule& sched);
Tensor ddpm_loss(const NoisePredictor& model, const Tensor& z0, std::span<const int> class_ids,
                 const DiffusionSchedule& sched, Rng& rng, double drop_probability = kClassDropProbability);

// DDPM ancestral sampling from pure noise; posterior variance beta_t for t > 0.
// Runs with the tape suspended, `chunk` images at a time.
Tensor sample(const NoisePredictor& model, const DiffusionSchedule& sched, std::size_t n, int class_id, Rng& rng,
              std::size_t chunk = 256);

inline constexpr double kEmaDecay = 0.9999;

// Exponential moving average shadow of a parameter tree.
class EmaModel {
public:
    EmaModel(const std::vector<NamedTensor>& params, double decay = kEmaDecay);

    // shadow <- decay * shadow + (1 - decay) * param, elementwise.
    void update(const std::vector<NamedTensor>& params);
    // Writes the shadow values into a structurally identical tree.
    void copy_to(const std::vector<NamedTensor>& params) const;

    double decay() const { return decay_; }
    const std::vector<NamedTensor>& shadow() const { return shadow_; }
    std::vector<NamedTensor>& shadow() { return shadow_; }

private:
    void check_structure(const std::vector<NamedTensor>& params) const;

    std::vector<NamedTensor> shadow_;
    double decay_;
};

}  // namespace fine
