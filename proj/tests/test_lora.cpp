#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <random>

#include "oracles.hpp"
#include "waterseg/checkpoint.hpp"
#include "waterseg/errors.hpp"
#include "waterseg/lora.hpp"
#include "waterseg/ops.hpp"
#include "waterseg/optim.hpp"
#include "waterseg/segformer.hpp"

using namespace waterseg;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const char* env = std::getenv("WATERSEG_TEST_TMP");
    fs::path root = env ? fs::path(env) : fs::temp_directory_path() / "waterseg_test_lora";
    auto dir = root / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

Tensor random_input(uint64_t seed, Shape shape) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> d(0, 1);
    std::vector<float> v(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& x : v) x = d(rng);
    return Tensor::from_data(std::move(shape), std::move(v));
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0;
    for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, static_cast<double>(std::abs(a.data()[i] - b.data()[i])));
    return m;
}

// Per-target d*r + r*k summed over every selected linear layer, read from the
// configuration rather than from the model.
int64_t expected_lora_count(const ModelConfig& c, int rank, int targets_per_block) {
    int64_t total = 0;
    for (int i = 0; i < 4; ++i) total += c.depths[i] * targets_per_block * (c.embed_dims[i] * rank + rank * c.embed_dims[i]);
    return total;
}

void randomize_b(SegFormerModel<float>& model, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> d(0, 0.05f);
    for (auto& [name, layer] : model.linear_layers())
        if (layer->adapter)
            for (auto& v : layer->adapter->b().data()) v = d(rng);
}

} // namespace

TEST_CASE("adapter starts with a zero update") {
    std::mt19937_64 rng(1);
    auto w0 = oracle::random_tensor(rng, {5, 3}, false);
    LoraAdapter<double> adapter(w0, 2, 4.0, rng);
    CHECK(adapter.a().shape() == Shape{2, 3});
    CHECK(adapter.b().shape() == Shape{5, 2});
    for (double v : adapter.b().data()) CHECK(v == 0.0);
    for (double v : adapter.delta_weight()) CHECK(v == 0.0);
    CHECK(adapter.scaling() == 2.0);

    auto x = oracle::random_tensor(rng, {4, 3}, false);
    auto bias = oracle::random_tensor(rng, {5}, false);
    auto base = ops::linear(x, w0, bias);
    auto adapted = lora_forward(adapter, x, bias);
    for (int i = 0; i < base.numel(); ++i) CHECK(adapted.data()[i] == base.data()[i]);

    double mean = 0, var = 0;
    std::mt19937_64 big_rng(2);
    LoraAdapter<double> big(Tensor64::zeros({64, 256}), 16, 32.0, big_rng);
    for (double v : big.a().data()) mean += v;
    mean /= static_cast<double>(big.a().numel());
    for (double v : big.a().data()) var += (v - mean) * (v - mean);
    var /= static_cast<double>(big.a().numel());
    CHECK(std::abs(mean) < 0.002);
    CHECK(std::sqrt(var) == doctest::Approx(0.02).epsilon(0.05));
}

TEST_CASE("rank-one update lands where B*A puts it") {
    std::mt19937_64 rng(3);
    auto w0 = oracle::random_tensor(rng, {4, 4}, false);
    auto a = Tensor64::from_data({1, 4}, {1, 0, 0, 0}, true);
    auto b = Tensor64::from_data({4, 1}, {0, 1, 0, 0}, true);
    LoraAdapter<double> adapter(w0, a, b, 1.0);
    auto delta = adapter.delta_weight();
    for (int i = 0; i < 16; ++i) CHECK(delta[i] == (i == 1 * 4 + 0 ? 1.0 : 0.0));

    std::vector<double> dense(w0.data().begin(), w0.data().end());
    dense[4] += 1.0;
    auto x = oracle::random_tensor(rng, {3, 4}, false);
    auto explicit_out = ops::linear(x, Tensor64::from_data({4, 4}, dense), Tensor64());
    auto lora_out = lora_forward(adapter, x);
    for (int i = 0; i < 12; ++i) CHECK(lora_out.data()[i] == doctest::Approx(explicit_out.data()[i]).epsilon(1e-12));
}

TEST_CASE("gradients reach A and B only") {
    std::mt19937_64 rng(4);
    auto w0 = oracle::random_tensor(rng, {6, 5}, false);
    LoraAdapter<double> adapter(w0, 2, 4.0, rng);
    for (auto& v : adapter.b().data()) v = std::normal_distribution<double>(0, 0.5)(rng);
    auto x = oracle::random_tensor(rng, {3, 5});
    auto bias = oracle::random_tensor(rng, {6}, false);
    auto g = oracle::check_gradients({x, adapter.a(), adapter.b()}, [&] {
        auto y = lora_forward(adapter, x, bias);
        return ops::sum(ops::mul(y, y));
    });
    CHECK(g.max_rel_error < 1e-4);

    reset_tape<double>();
    auto y = lora_forward(adapter, x, bias);
    backward(ops::sum(y));
    CHECK_FALSE(w0.has_grad());
    CHECK(adapter.a().has_grad());
    CHECK(adapter.b().has_grad());
    reset_tape<double>();
}

TEST_CASE("merge and unmerge") {
    std::mt19937_64 rng(5);
    auto w0 = oracle::random_tensor(rng, {6, 5}, false);
    const std::vector<double> original(w0.data().begin(), w0.data().end());
    LoraAdapter<double> adapter(w0, 2, 4.0, rng);

    adapter.merge();
    CHECK(std::vector<double>(w0.data().begin(), w0.data().end()) == original);
    CHECK_THROWS_AS(adapter.merge(), StateError);
    auto x = oracle::random_tensor(rng, {3, 5}, false);
    CHECK_THROWS_AS(lora_forward(adapter, x), StateError);
    adapter.unmerge();
    CHECK_THROWS_AS(adapter.unmerge(), StateError);

    for (auto& v : adapter.b().data()) v = std::normal_distribution<double>(0, 0.3)(rng);
    auto unmerged = lora_forward(adapter, x);
    adapter.merge();
    auto merged = ops::linear(x, w0, Tensor64());
    for (int i = 0; i < merged.numel(); ++i) CHECK(std::abs(merged.data()[i] - unmerged.data()[i]) < 1e-5);
    adapter.unmerge();
    for (int i = 0; i < 30; ++i) CHECK(std::abs(w0.data()[i] - original[i]) < 1e-6);
}

TEST_CASE("alpha scales the adapter contribution linearly") {
    std::mt19937_64 rng(6);
    auto w0 = oracle::random_tensor(rng, {4, 3}, false);
    LoraAdapter<double> adapter(w0, 2, 2.0, rng);
    for (auto& v : adapter.b().data()) v = std::normal_distribution<double>(0, 0.3)(rng);
    auto x = oracle::random_tensor(rng, {5, 3}, false);
    auto base = ops::linear(x, w0, Tensor64());
    auto one = ops::sub(lora_forward(adapter, x), base);
    adapter.set_alpha(2.0 * 3.0);
    auto three = ops::sub(lora_forward(adapter, x), base);
    for (int i = 0; i < one.numel(); ++i) CHECK(three.data()[i] == doctest::Approx(3.0 * one.data()[i]).epsilon(1e-12));
}

TEST_CASE("injection into the nano model") {
    SegFormerModel<float> model(ModelConfig::nano(), 7);
    auto x = random_input(8, {2, 3, 64, 64});
    auto before = model.forward(x).clone();

    LoraSettings settings;
    std::mt19937_64 rng(9);
    auto result = inject_lora(model, settings, rng);
    CHECK(result.adapted.size() == 8);
    CHECK(result.warnings.empty());
    CHECK(max_abs_diff(before, model.forward(x)) < 1e-6);

    const int64_t expected = expected_lora_count(ModelConfig::nano(), 4, 2);
    CHECK(expected == 3840);
    const auto report = trainable_param_report(model);
    CHECK(report.trainable == expected);
    CHECK(model.param_count(true) == expected);
    CHECK(report.frozen == oracle::segformer_param_count(ModelConfig::nano()));
    CHECK(report.ratio == doctest::Approx(static_cast<double>(expected) / (expected + report.frozen)));

    for (const auto& p : model.parameters()) {
        const bool adapter_param = p.name.find(".lora_") != std::string::npos;
        CHECK(p.tensor.requires_grad() == adapter_param);
    }
    CHECK_THROWS_AS(inject_lora(model, settings, rng), StateError);
}

TEST_CASE("injection errors and warnings") {
    SegFormerModel<float> model(ModelConfig::nano(), 10);
    std::mt19937_64 rng(11);
    LoraSettings none;
    none.targets = {"attn.nothing"};
    CHECK_THROWS_AS(inject_lora(model, none, rng), ConfigError);
    LoraSettings zero_rank;
    zero_rank.rank = 0;
    CHECK_THROWS_AS(inject_lora(model, zero_rank, rng), ConfigError);

    LoraSettings head_only;
    head_only.targets = {"decoder.head"};
    head_only.rank = 4;
    auto result = inject_lora(model, head_only, rng);
    REQUIRE(result.adapted.size() == 1);
    CHECK(result.warnings.size() == 1); // head is 64 -> 1, so rank 4 >= min(d, k)
    CHECK(lora_target_matches("encoder.stages.0.blocks.0.attn.q", "attn.q"));
    CHECK_FALSE(lora_target_matches("encoder.stages.0.blocks.0.attn.qq", "attn.q"));
}

TEST_CASE("parameter report arithmetic") {
    SegFormerModel<float> plain(ModelConfig::nano(), 12);
    auto report = trainable_param_report(plain);
    CHECK(report.ratio == 1.0);
    CHECK(report.frozen == 0);

    std::mt19937_64 rng(13);
    LoraAdapter<float> adapter(Tensor::zeros({64, 64}), 4, 8.0, rng);
    CHECK(adapter.trainable_count() == 512);
    CHECK(static_cast<double>(adapter.trainable_count()) / (64.0 * 64.0) == 0.125);
}

TEST_CASE("merged and unmerged model forwards agree") {
    SegFormerModel<float> model(ModelConfig::nano(), 14);
    std::mt19937_64 rng(15);
    inject_lora(model, LoraSettings{}, rng);
    randomize_b(model, 16);
    auto x = random_input(17, {1, 3, 64, 64});
    auto unmerged = model.forward(x).clone();
    merge_all(model);
    CHECK(max_abs_diff(unmerged, model.forward(x)) < 1e-5);
    unmerge_all(model);
    CHECK(max_abs_diff(unmerged, model.forward(x)) < 1e-5);
}

TEST_CASE("optimizer steps leave frozen weights bit-identical") {
    SegFormerModel<float> model(ModelConfig::nano(), 18);
    std::mt19937_64 rng(19);
    inject_lora(model, LoraSettings{}, rng);
    std::vector<std::vector<float>> frozen_before;
    for (const auto& p : model.parameters())
        if (!p.tensor.requires_grad()) frozen_before.emplace_back(p.tensor.data().begin(), p.tensor.data().end());

    auto params = model.parameter_tensors();
    AdamWState<float> state;
    auto x = random_input(20, {2, 3, 32, 32});
    std::vector<float> t(2 * 32 * 32);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = (i % 32) < 12 ? 1.0f : 0.0f;
    auto target = Tensor::from_data({2, 1, 32, 32}, t);
    for (int step = 0; step < 5; ++step) {
        reset_tape<float>();
        for (auto& p : params) p.zero_grad();
        backward(ops::binary_cross_entropy_with_logits(model.forward(x), target));
        adamw_step(std::span(params), state, AdamWConfig{});
    }
    reset_tape<float>();
    std::size_t i = 0;
    bool b_moved = false;
    for (const auto& p : model.parameters()) {
        if (!p.tensor.requires_grad()) {
            CHECK(std::memcmp(p.tensor.data().data(), frozen_before[i].data(), frozen_before[i].size() * 4) == 0);
            ++i;
        } else if (p.name.find("lora_B") != std::string::npos) {
            for (float v : p.tensor.data()) b_moved = b_moved || v != 0.0f;
        }
    }
    CHECK(i == frozen_before.size());
    CHECK(b_moved);
}

TEST_CASE("adapter-only checkpoints reload onto a matching base") {
    const auto dir = scratch("adapters");
    SegFormerModel<float> model(ModelConfig::nano(), 21);
    save_checkpoint(model, dir / "base.json");
    std::mt19937_64 rng(22);
    LoraSettings settings;
    settings.rank = 2;
    settings.alpha = 3.0;
    inject_lora(model, settings, rng);
    randomize_b(model, 23);
    save_adapters(model, dir / "adapter.json");
    save_checkpoint(model, dir / "full.json");

    auto manifest = read_checkpoint(dir / "adapter.json");
    CHECK(manifest.kind == "adapter");
    CHECK(manifest.tensors.size() == 16);
    CHECK(manifest.meta["lora"][0]["rank"] == 2);
    CHECK(manifest.meta["lora"][0]["alpha"] == 3.0);

    auto x = random_input(24, {1, 3, 64, 64});
    auto expected = model.forward(x).clone();

    auto base = load_model(dir / "base.json");
    load_adapters(base, dir / "adapter.json");
    CHECK(max_abs_diff(expected, base.forward(x)) == 0.0);
    CHECK(base.param_count(true) == model.param_count(true));

    auto full = load_model(dir / "full.json");
    CHECK(max_abs_diff(expected, full.forward(x)) == 0.0);
    CHECK(full.param_count(true) == model.param_count(true));

    auto wrong = ModelConfig::nano();
    wrong.decoder_dim = 32;
    SegFormerModel<float> other(wrong, 1);
    CHECK_THROWS_AS(load_adapters(other, dir / "adapter.json"), ConfigError);
    CHECK_THROWS_AS(load_adapters(base, dir / "adapter.json"), StateError);

    merge_all(model);
    CHECK_THROWS_AS(save_checkpoint(model, dir / "merged.json"), StateError);
}
