#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "waterseg/tensor.hpp"

namespace waterseg {

// Low-rank update attached to a linear map with frozen weight W0 (d x k):
//   W_eff = W0 + (alpha / rank) * B * A,   A: rank x k,  B: d x rank.
// B starts at zero so the adapted map initially equals the base map.
template <typename T>
class LoraAdapter {
public:
    LoraAdapter(BasicTensor<T> base_weight, int rank, double alpha, std::mt19937_64& rng, double init_std = 0.02);

    // Restores an adapter from stored factors (checkpoint loading).
    LoraAdapter(BasicTensor<T> base_weight, BasicTensor<T> a, BasicTensor<T> b, double alpha);

    const BasicTensor<T>& base_weight() const { return base_weight_; }
    const BasicTensor<T>& a() const { return a_; }
    const BasicTensor<T>& b() const { return b_; }
    BasicTensor<T>& a() { return a_; }
    BasicTensor<T>& b() { return b_; }

    int rank() const { return rank_; }
    double alpha() const { return alpha_; }
    void set_alpha(double alpha) { alpha_ = alpha; }
    double scaling() const { return alpha_ / static_cast<double>(rank_); }
    bool merged() const { return merged_; }

    int64_t out_features() const { return base_weight_.dim(0); }
    int64_t in_features() const { return base_weight_.dim(1); }
    int64_t trainable_count() const { return a_.numel() + b_.numel(); }

    // Dense (alpha/rank) * B * A. Only for folding and tests; the forward
    // path never materializes it.
    std::vector<T> delta_weight() const;

    void merge();
    void unmerge();

private:
    BasicTensor<T> base_weight_;
    BasicTensor<T> a_;
    BasicTensor<T> b_;
    int rank_ = 0;
    double alpha_ = 0;
    bool merged_ = false;
};

// x * W0^T + bias + (alpha/rank) * (x * A^T) * B^T. Throws StateError when the
// adapter is merged.
template <typename T>
BasicTensor<T> lora_forward(const LoraAdapter<T>& adapter, const BasicTensor<T>& x,
                            const BasicTensor<T>& bias = BasicTensor<T>());

struct LoraSettings {
    bool enabled = false;
    std::vector<std::string> targets{"attn.q", "attn.v"};
    int rank = 4;
    double alpha = 8.0; // 2 * rank
    double init_std = 0.02;
};

// A linear-layer name matches a target when it equals it or ends with "." + target.
bool lora_target_matches(const std::string& layer_name, const std::string& target);

struct LoraInjection {
    std::vector<std::string> adapted;
    std::vector<std::string> warnings;
};

struct TrainableReport {
    int64_t trainable = 0;
    int64_t frozen = 0;
    double ratio = 1.0;
};

template <typename T>
class SegFormerModel;

// Wraps every selected linear map with an adapter and freezes all other
// parameters. Throws ConfigError if the selector matches nothing.
template <typename T>
LoraInjection inject_lora(SegFormerModel<T>& model, const LoraSettings& settings, std::mt19937_64& rng);

template <typename T>
void merge_all(SegFormerModel<T>& model);

template <typename T>
void unmerge_all(SegFormerModel<T>& model);

template <typename T>
TrainableReport trainable_param_report(const SegFormerModel<T>& model);

extern template class LoraAdapter<float>;
extern template class LoraAdapter<double>;

} // namespace waterseg
