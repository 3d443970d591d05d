// Production kernels against their serial references.
#include <benchmark/benchmark.h>
#include <omp.h>

#include <memory>
#include <vector>

#include "fruitgrader/cascade.hpp"
#include "fruitgrader/kernels.hpp"
#include "fruitgrader/random.hpp"

using namespace fruitgrader;

namespace {

std::vector<float> random_vec(std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<float> v(n);
    for (auto& x : v) x = static_cast<float>(uniform(rng, -1.0, 1.0));
    return v;
}

kernels::ConvGeometry conv_geometry(int side) {
    kernels::ConvGeometry g;
    g.batch = 8;
    g.in_channels = 16;
    g.in_h = g.in_w = side;
    g.out_channels = 32;
    g.kernel = 3;
    g.pad = 1;
    return g;
}

void BM_ConvForward(benchmark::State& state) {
    const auto g = conv_geometry(static_cast<int>(state.range(0)));
    omp_set_num_threads(static_cast<int>(state.range(1)));
    const auto in = random_vec(static_cast<std::size_t>(g.batch) * g.in_channels * g.in_h * g.in_w, 1);
    const auto w = random_vec(g.out_channels * g.patch(), 2);
    const auto b = random_vec(static_cast<std::size_t>(g.out_channels), 3);
    std::vector<float> out(static_cast<std::size_t>(g.batch) * g.out_channels * g.positions());
    std::vector<float> cols(g.col_size());
    for (auto _ : state) {
        kernels::conv2d_forward(g, in.data(), w.data(), b.data(), out.data(), cols.data());
        benchmark::DoNotOptimize(out.data());
    }
    state.SetItemsProcessed(state.iterations() * g.batch);
}

void BM_ConvForwardReference(benchmark::State& state) {
    const auto g = conv_geometry(static_cast<int>(state.range(0)));
    const auto in = random_vec(static_cast<std::size_t>(g.batch) * g.in_channels * g.in_h * g.in_w, 1);
    const auto w = random_vec(g.out_channels * g.patch(), 2);
    const auto b = random_vec(static_cast<std::size_t>(g.out_channels), 3);
    std::vector<float> out(static_cast<std::size_t>(g.batch) * g.out_channels * g.positions());
    for (auto _ : state) {
        kernels::reference::conv2d_forward(g, in.data(), w.data(), b.data(), out.data());
        benchmark::DoNotOptimize(out.data());
    }
    state.SetItemsProcessed(state.iterations() * g.batch);
}

struct FeatureSetup {
    std::vector<cascade::HaarFeature> pool;
    std::vector<cascade::WindowRef> windows;
};

const FeatureSetup& feature_setup() {
    static const FeatureSetup s = [] {
        FeatureSetup f;
        f.pool = cascade::generate_feature_pool(24, 24, 2000, 7);
        Rng rng(9);
        for (int i = 0; i < 256; ++i) {
            imaging::Image img(24, 24, 1);
            for (auto& v : img.data()) v = static_cast<float>(uniform(rng, 0.0, 1.0));
            f.windows.push_back({std::make_shared<const imaging::IntegralImage>(img), 0, 0, 1.0});
        }
        return f;
    }();
    return s;
}

void BM_FeatureMatrix(benchmark::State& state) {
    const auto& s = feature_setup();
    omp_set_num_threads(static_cast<int>(state.range(0)));
    for (auto _ : state) benchmark::DoNotOptimize(cascade::compute_feature_matrix(s.pool, s.windows, 24, 24));
    state.SetItemsProcessed(state.iterations() * static_cast<long>(s.pool.size() * s.windows.size()));
}

void BM_FeatureMatrixReference(benchmark::State& state) {
    const auto& s = feature_setup();
    for (auto _ : state) {
        benchmark::DoNotOptimize(cascade::reference::compute_feature_matrix(s.pool, s.windows, 24, 24));
    }
    state.SetItemsProcessed(state.iterations() * static_cast<long>(s.pool.size() * s.windows.size()));
}

}  // namespace

BENCHMARK(BM_ConvForward)->ArgsProduct({{16, 32}, {1, 2, 4}})->UseRealTime()->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ConvForwardReference)->Arg(16)->Arg(32)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_FeatureMatrix)->Arg(1)->Arg(2)->Arg(4)->UseRealTime()->Unit(benchmark::kMillisecond);
BENCHMARK(BM_FeatureMatrixReference)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
