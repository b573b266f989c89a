#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "waterseg/tensor.hpp"

namespace waterseg {

struct AdamWConfig {
    double lr = 6e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

template <typename T>
struct AdamWState {
    std::vector<std::vector<T>> first_moment;
    std::vector<std::vector<T>> second_moment;
    int64_t step = 0;
};

// One decoupled-weight-decay Adam update. Parameters that are frozen or did
// not receive a gradient are left untouched. An empty state is sized on the
// first call; afterwards the slot count must match the parameter count.
template <typename T>
void adamw_step(std::span<BasicTensor<T>> params, AdamWState<T>& state, const AdamWConfig& config);

extern template void adamw_step<float>(std::span<BasicTensor<float>>, AdamWState<float>&, const AdamWConfig&);
extern template void adamw_step<double>(std::span<BasicTensor<double>>, AdamWState<double>&, const AdamWConfig&);

} // namespace waterseg
