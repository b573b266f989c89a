#include "waterseg/lora.hpp"

#include <algorithm>

#include "waterseg/errors.hpp"
#include "waterseg/ops.hpp"
#include "waterseg/segformer.hpp"

namespace waterseg {

template <typename T>
LoraAdapter<T>::LoraAdapter(BasicTensor<T> base_weight, int rank, double alpha, std::mt19937_64& rng,
                            double init_std)
    : base_weight_(std::move(base_weight)), rank_(rank), alpha_(alpha) {
    if (rank < 1) throw ConfigError("lora rank must be >= 1, got " + std::to_string(rank));
    if (base_weight_.ndim() != 2) throw ShapeError("lora base weight must be 2-D, got " + shape_str(base_weight_.shape()));
    const int64_t d = base_weight_.dim(0), k = base_weight_.dim(1);
    std::normal_distribution<double> dist(0.0, init_std);
    std::vector<T> a(static_cast<std::size_t>(rank * k));
    for (auto& v : a) v = static_cast<T>(dist(rng));
    a_ = BasicTensor<T>::from_data({rank, k}, std::move(a), true);
    b_ = BasicTensor<T>::zeros({d, rank}, true);
}

template <typename T>
LoraAdapter<T>::LoraAdapter(BasicTensor<T> base_weight, BasicTensor<T> a, BasicTensor<T> b, double alpha)
    : base_weight_(std::move(base_weight)), a_(std::move(a)), b_(std::move(b)), alpha_(alpha) {
    if (a_.ndim() != 2 || b_.ndim() != 2 || a_.dim(0) != b_.dim(1) || a_.dim(1) != base_weight_.dim(1) ||
        b_.dim(0) != base_weight_.dim(0)) {
        throw ShapeError("lora factors A " + shape_str(a_.shape()) + " and B " + shape_str(b_.shape()) +
                         " do not fit base weight " + shape_str(base_weight_.shape()));
    }
    rank_ = static_cast<int>(a_.dim(0));
}

template <typename T>
std::vector<T> LoraAdapter<T>::delta_weight() const {
    const int64_t d = out_features(), k = in_features();
    std::vector<T> delta(static_cast<std::size_t>(d * k), T(0));
    const auto a = a_.data();
    const auto b = b_.data();
    const auto s = static_cast<T>(scaling());
    for (int64_t i = 0; i < d; ++i) {
        for (int64_t r = 0; r < rank_; ++r) {
            const T coeff = s * b[i * rank_ + r];
            for (int64_t j = 0; j < k; ++j) delta[i * k + j] += coeff * a[r * k + j];
        }
    }
    return delta;
}

template <typename T>
void LoraAdapter<T>::merge() {
    if (merged_) throw StateError("lora adapter is already merged");
    const auto delta = delta_weight();
    auto w = base_weight_.data();
    for (std::size_t i = 0; i < w.size(); ++i) w[i] += delta[i];
    merged_ = true;
}

template <typename T>
void LoraAdapter<T>::unmerge() {
    if (!merged_) throw StateError("lora adapter is not merged");
    const auto delta = delta_weight();
    auto w = base_weight_.data();
    for (std::size_t i = 0; i < w.size(); ++i) w[i] -= delta[i];
    merged_ = false;
}

template <typename T>
BasicTensor<T> lora_forward(const LoraAdapter<T>& adapter, const BasicTensor<T>& x, const BasicTensor<T>& bias) {
    if (adapter.merged()) throw StateError("lora_forward on a merged adapter; use the plain linear path");
    auto base = ops::linear(x, adapter.base_weight(), bias);
    auto low = ops::linear(ops::linear(x, adapter.a(), BasicTensor<T>()), adapter.b(), BasicTensor<T>());
    return ops::add(base, ops::scale(low, static_cast<T>(adapter.scaling())));
}

bool lora_target_matches(const std::string& layer_name, const std::string& target) {
    if (target.empty()) return false;
    if (layer_name == target) return true;
    if (layer_name.size() <= target.size()) return false;
    return layer_name.compare(layer_name.size() - target.size(), target.size(), target) == 0 &&
           layer_name[layer_name.size() - target.size() - 1] == '.';
}

template <typename T>
LoraInjection inject_lora(SegFormerModel<T>& model, const LoraSettings& settings, std::mt19937_64& rng) {
    if (settings.rank < 1) throw ConfigError("lora rank must be >= 1, got " + std::to_string(settings.rank));
    if (settings.alpha <= 0) throw ConfigError("lora alpha must be positive");
    std::vector<std::pair<std::string, nn::Linear<T>*>> selected;
    for (auto& [name, layer] : model.linear_layers()) {
        const bool hit = std::any_of(settings.targets.begin(), settings.targets.end(),
                                     [&](const std::string& t) { return lora_target_matches(name, t); });
        if (hit) selected.emplace_back(name, layer);
    }
    if (selected.empty()) {
        std::string joined;
        for (const auto& t : settings.targets) joined += (joined.empty() ? "" : ",") + t;
        throw ConfigError("lora target selector [" + joined + "] matches no linear layer");
    }
    LoraInjection result;
    for (auto& p : model.parameter_tensors()) p.set_requires_grad(false);
    for (auto& [name, layer] : selected) {
        if (layer->adapter) throw StateError("layer " + name + " already carries a lora adapter");
        const int64_t d = layer->out_features(), k = layer->in_features();
        if (settings.rank >= std::min(d, k)) {
            result.warnings.push_back("rank " + std::to_string(settings.rank) + " >= min(" + std::to_string(d) + "," +
                                      std::to_string(k) + ") on " + name + ": no compression");
        }
        layer->adapter.emplace(layer->weight, settings.rank, settings.alpha, rng, settings.init_std);
        result.adapted.push_back(name);
    }
    return result;
}

template <typename T>
void merge_all(SegFormerModel<T>& model) {
    for (auto& [name, layer] : model.linear_layers())
        if (layer->adapter) layer->adapter->merge();
}

template <typename T>
void unmerge_all(SegFormerModel<T>& model) {
    for (auto& [name, layer] : model.linear_layers())
        if (layer->adapter) layer->adapter->unmerge();
}

template <typename T>
TrainableReport trainable_param_report(const SegFormerModel<T>& model) {
    TrainableReport report;
    for (const auto& p : model.parameters()) {
        if (p.tensor.requires_grad())
            report.trainable += p.tensor.numel();
        else
            report.frozen += p.tensor.numel();
    }
    const int64_t total = report.trainable + report.frozen;
    report.ratio = total > 0 ? static_cast<double>(report.trainable) / static_cast<double>(total) : 1.0;
    return report;
}

template class LoraAdapter<float>;
template class LoraAdapter<double>;

template BasicTensor<float> lora_forward(const LoraAdapter<float>&, const BasicTensor<float>&,
                                         const BasicTensor<float>&);
template BasicTensor<double> lora_forward(const LoraAdapter<double>&, const BasicTensor<double>&,
                                          const BasicTensor<double>&);
template LoraInjection inject_lora(SegFormerModel<float>&, const LoraSettings&, std::mt19937_64&);
template LoraInjection inject_lora(SegFormerModel<double>&, const LoraSettings&, std::mt19937_64&);
template void merge_all(SegFormerModel<float>&);
template void merge_all(SegFormerModel<double>&);
template void unmerge_all(SegFormerModel<float>&);
template void unmerge_all(SegFormerModel<double>&);
template TrainableReport trainable_param_report(const SegFormerModel<float>&);
template TrainableReport trainable_param_report(const SegFormerModel<double>&);

} // namespace waterseg
