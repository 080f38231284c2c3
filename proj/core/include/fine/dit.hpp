#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fine/factorized.hpp"
#include "fine/rng.hpp"
#include "fine/tensor.hpp"

namespace fine {

enum class Backing { plain, factorized };

std::string_view backing_name(Backing backing);
Backing backing_from_name(std::string_view name);

struct DiTConfig {
    std::size_t image_size = 8;
    std::size_t channels = 1;
    std::size_t patch = 2;
    std::size_t width = 64;
    std::size_t hidden = 256;
    std::size_t heads = 4;
    std::size_t depth = 6;
    std::size_t num_classes = 2;  // 0 = unconditional only
    std::size_t time_features = 32;
    std::size_t diffusion_steps = 400;
    Backing backing = Backing::plain;
    std::size_t rank = 32;   // factorized only
    std::size_t group = 4;   // factorized only

    std::size_t tokens() const { return (image_size / patch) * (image_size / patch); }
    std::size_t token_len() const { return channels * patch * patch; }
    // Throws ConfigError on violated structural constraints.
    void validate() const;
};

// Class id that selects the unconditional embedding row.
inline constexpr int kUnconditional = -1;

// Anything that predicts diffusion noise for a batch [n x c x h x h].
class NoisePredictor {
public:
    virtual ~NoisePredictor() = default;
    virtual Tensor predict_noise(const Tensor& z_t, std::span<const int> t, std::span<const int> class_ids) const = 0;
    // {c, h, h}
    virtual Shape sample_shape() const = 0;
};

struct BlockParams {
    Tensor ln1_gain, ln1_bias;
    Tensor qkv_bias, o_bias;
    Tensor ln2_gain, ln2_bias;
    Tensor in_bias, out_bias;
    // Plain backing only; empty handles (numel 0) under factorized backing.
    std::array<Tensor, 4> weight;
};

// Block weights captured during a forward pass, one array per layer.
struct ForwardTrace {
    std::vector<std::array<Tensor, 4>> weights;
};

class DiTModel : public NoisePredictor {
public:
    // Allocates every parameter: matrices and biases zero, norm gains one.
    explicit DiTModel(DiTConfig config);
    DiTModel(const DiTModel&) = delete;
    DiTModel& operator=(const DiTModel&) = delete;
    DiTModel(DiTModel&&) = default;
    DiTModel& operator=(DiTModel&&) = default;

    const DiTConfig& config() const { return config_; }
    std::size_t depth() const { return blocks.size(); }

    // Weight of one family in one block: the stored matrix, or the
    // materialized factorization under factorized backing.
    Tensor block_weight(std::size_t layer, FamilyKind kind) const;

    Tensor forward(const Tensor& z_t, std::span<const int> t, std::span<const int> class_ids,
                   ForwardTrace* trace = nullptr) const;
    // Single image [c x h x h].
    Tensor forward(const Tensor& z_t, int t, std::optional<int> class_id) const;

    Tensor predict_noise(const Tensor& z_t, std::span<const int> t, std::span<const int> class_ids) const override {
        return forward(z_t, t, class_ids);
    }
    Shape sample_shape() const override;

    // Stable names and storage-sharing handles for every parameter.
    std::vector<NamedTensor> parameters() const;
    std::vector<Tensor> sigma_parameters() const;

    // Deep copy: no storage shared with this model.
    DiTModel clone() const;

    void set_trainable(bool trainable);

    Tensor patch_weight, patch_bias;
    Tensor pos_embed;
    Tensor time_weight, time_bias;
    Tensor class_table;
    std::vector<BlockParams> blocks;
    FamilySet families;  // factorized backing only
    Tensor final_gain, final_bias;
    Tensor head_weight, head_bias;

    // Parameters copied from a source model by a transfer recipe. Unset means
    // "derive from structure" in count_params.
    std::optional<std::size_t> transferred_params;

private:
    DiTConfig config_;
};

// Fills the non-block parameters (patch/time/head projections, embedding
// tables) with fresh draws: fan-in He Gaussians for projections, N(0, 0.02^2)
// for tables, zero biases, unit norm gains.
void init_fresh_embeddings(DiTModel& model, Rng& rng);

// Sinusoidal timestep features [n x features].
Tensor timestep_features(std::span<const int> t, std::size_t features);

// Multi-head self-attention on hseq [(batch*T) x D]: packed projection, per-head
// softmax(q k^T / sqrt(d)) v, heads concatenated then projected by w_o. The
// caller adds the residual.
Tensor attention_block(const Tensor& hseq, const Tensor& w_qkv, const Tensor& w_o, std::size_t heads,
                       std::size_t batch = 1);
Tensor attention_block(const Tensor& hseq, const Tensor& w_qkv, const Tensor& qkv_bias, const Tensor& w_o,
                       const Tensor& o_bias, std::size_t heads, std::size_t batch);

// gelu(u W_in + b1) W_out + b2, tokenwise.
Tensor pff_block(const Tensor& u, const Tensor& w_in, const Tensor& b1, const Tensor& w_out, const Tensor& b2);

ParamCount count_params(const DiTModel& model);

}  // namespace fine
