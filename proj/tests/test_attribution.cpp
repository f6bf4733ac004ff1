#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "flexkd/attribution.hpp"
#include "flexkd/error.hpp"
#include "flexkd/losses.hpp"
#include "test_util.hpp"

using namespace flexkd;

namespace {

Batch one_sample(std::size_t d, std::uint64_t seed, int label = 0) {
    Rng rng(seed);
    Batch b;
    b.size = 1;
    b.feature_dim = d;
    b.features = testutil::random_vec(rng, d);
    b.labels = {label};
    return b;
}

LabeledDataset feature_dataset(std::size_t n, std::size_t d, std::size_t classes,
                               std::uint64_t seed) {
    Rng rng(seed);
    LabeledDataset ds;
    ds.kind = LabeledDataset::Kind::features;
    ds.feature_dim = d;
    ds.num_classes = classes;
    ds.features = testutil::random_vec(rng, n * d);
    ds.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) ds.labels[i] = static_cast<int>(rng.below(classes));
    return ds;
}

}  // namespace

TEST_CASE("dead unit scores exactly zero") {
    MLPConfig c;
    c.input_dim = 6;
    c.hidden_dims = {10};
    c.num_classes = 3;
    auto model = init_mlp(c, 4);
    auto [w, b] = model->output_head();
    // zero the head row of hidden unit 7: it cannot influence any logit
    for (std::size_t j = 0; j < 3; ++j) w.values_mut()[7 * 3 + j] = 0.0;
    for (int s = 0; s < 5; ++s) {
        const auto g = per_sample_importance(*model, one_sample(6, 100 + s, s % 3),
                                             OutputReduction::task_loss);
        CHECK(g[7] == 0.0);
    }
}

TEST_CASE("linear teacher importance equals |w|") {
    MLPConfig c;
    c.input_dim = 5;
    c.hidden_dims = {6};
    c.num_classes = 1;  // single raw output
    auto model = init_mlp(c, 12);
    const auto [w, b] = model->output_head();
    const auto g =
        per_sample_importance(*model, one_sample(5, 55), OutputReduction::predicted_logit);
    REQUIRE(g.size() == 6);
    for (std::size_t i = 0; i < 6; ++i) {
        CHECK(g[i] == doctest::Approx(std::fabs(w.values()[i])).epsilon(1e-12));
    }
}

TEST_CASE("importance matches finite differences on the hidden activation") {
    MLPConfig c;
    c.input_dim = 8;
    c.hidden_dims = {16};
    c.num_classes = 3;
    auto model = init_mlp(c, 31);
    const auto [w_head, b_head] = model->output_head();

    for (int s = 0; s < 10; ++s) {
        const Batch sample = one_sample(8, 500 + s, s % 3);
        Tape tape;
        ForwardResult fr = model->forward(tape, sample);
        const std::vector<double> hv = fr.last_hidden.values();
        const auto g = per_sample_importance(*model, sample, OutputReduction::task_loss);

        // downstream-only oracle: perturb h and recompute head + loss
        auto scalar_of = [&](const std::vector<double>& h_in) {
            Tape t;
            Tensor h = Tensor::from({1, 16}, h_in);
            Tensor logits = t.bias_add(t.matmul(h, w_head), b_head);
            return t.softmax_cross_entropy(logits, sample.labels).item();
        };
        const auto fd = testutil::fd_grad(scalar_of, hv);
        for (std::size_t i = 0; i < 16; ++i) {
            CHECK(testutil::rel_err(g[i], std::fabs(fd[i]), 1e-8) < 1e-4);
        }
    }
}

TEST_CASE("aggregation arithmetic") {
    ImportanceProfile p = profile_from_scores({{1, 3}, {3, 1}}, OutputReduction::task_loss);
    CHECK(p.scores == std::vector<double>{2, 2});
    CHECK(p.ranked_indices == std::vector<int>{0, 1});  // tie toward lower index
    CHECK(p.num_samples == 2);

    ImportanceProfile single = profile_from_scores({{0.5, 0.25}}, OutputReduction::task_loss);
    CHECK(single.scores == std::vector<double>{0.5, 0.25});
    CHECK_THROWS_AS(profile_from_scores({}, OutputReduction::task_loss), DataError);
}

TEST_CASE("aggregate equals brute-force per-sample mean bit for bit") {
    MLPConfig c;
    c.input_dim = 4;
    c.hidden_dims = {12};
    c.num_classes = 2;
    auto model = init_mlp(c, 8);
    LabeledDataset ds = feature_dataset(17, 4, 2, 61);
    ImportanceProfile profile =
        aggregate_importance(*model, ds, OutputReduction::task_loss, {});
    CHECK(profile.num_samples == 17);

    std::vector<double> mean(12, 0.0);
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const auto g =
            per_sample_importance(*model, single_batch(ds, i), OutputReduction::task_loss);
        for (std::size_t j = 0; j < 12; ++j) mean[j] += g[j];
    }
    for (double& v : mean) v *= 1.0 / 17.0;
    CHECK(profile.scores == mean);
}

TEST_CASE("rank_neurons ordering and invariances") {
    CHECK(rank_neurons({0.1, 0.9, 0.5}) == std::vector<int>{1, 2, 0});
    CHECK(rank_neurons({2, 2, 2, 2}) == std::vector<int>{0, 1, 2, 3});
    CHECK_THROWS_AS(rank_neurons({1.0, std::nan("")}), NumericError);

    Rng rng(71);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<double> g(10);
        for (double& v : g) v = rng.uniform(0.0, 5.0);
        const auto base = rank_neurons(g);
        std::vector<double> scaled = g, mapped = g;
        for (double& v : scaled) v *= 3.7;
        for (double& v : mapped) v = std::log1p(v) + v * v;  // strictly increasing on [0, inf)
        CHECK(rank_neurons(scaled) == base);
        CHECK(rank_neurons(mapped) == base);
    }
}

TEST_CASE("select_top prefix nesting") {
    ImportanceProfile p = profile_from_scores({{0.1, 0.9, 0.5, 0.7}}, OutputReduction::task_loss);
    CHECK(p.ranked_indices == std::vector<int>{1, 3, 2, 0});
    CHECK(select_top(p, 2).indices == std::vector<int>{1, 3});
    CHECK(select_top(p, 4).indices == p.ranked_indices);
    for (std::size_t k = 1; k < 4; ++k) {
        const auto a = select_top(p, k).indices;
        const auto b = select_top(p, k + 1).indices;
        CHECK(std::equal(a.begin(), a.end(), b.begin()));
    }
    CHECK_THROWS_AS(select_top(p, 5), ConfigError);
    CHECK_THROWS_AS(select_top(p, 0), ConfigError);
}

TEST_CASE("calibration subsampling is deterministic and recorded") {
    MLPConfig c;
    c.input_dim = 4;
    c.hidden_dims = {6};
    c.num_classes = 2;
    auto model = init_mlp(c, 2);
    LabeledDataset ds = feature_dataset(40, 4, 2, 77);
    AttributionOptions opts;
    opts.calibration_fraction = 0.25;
    opts.calibration_seed = 5;
    ImportanceProfile a = aggregate_importance(*model, ds, OutputReduction::task_loss, opts);
    ImportanceProfile b = aggregate_importance(*model, ds, OutputReduction::task_loss, opts);
    CHECK(a.num_samples == 10);
    CHECK(a.scores == b.scores);
    opts.calibration_seed = 6;
    ImportanceProfile c2 = aggregate_importance(*model, ds, OutputReduction::task_loss, opts);
    CHECK(a.scores != c2.scores);
}

TEST_CASE("profile file round trip and binding") {
    testutil::TempDir tmp("profile");
    ImportanceProfile p = profile_from_scores({{0.25, 1.5, 0.75}}, OutputReduction::task_loss);
    p.teacher_checksum = "fnv1a:deadbeefdeadbeef";
    p.calibration_fraction = 0.5;
    p.calibration_seed = 19;
    const auto path = tmp.path() / "profile.json";
    save_profile(p, path);
    ImportanceProfile loaded = load_profile(path);
    CHECK(loaded.scores == p.scores);
    CHECK(loaded.ranked_indices == p.ranked_indices);
    CHECK(loaded.teacher_checksum == p.teacher_checksum);
    CHECK(loaded.calibration_fraction == 0.5);
}

TEST_CASE("activation sparsity profile") {
    MLPConfig c;
    c.input_dim = 4;
    c.hidden_dims = {8, 8};
    c.num_classes = 2;
    c.activation = Activation::relu;
    auto model = init_mlp(c, 14);
    LabeledDataset ds = feature_dataset(30, 4, 2, 99);

    SparsityTable table = activation_sparsity_profile(*model, ds, {1e-9, 0.5, 1.0, 2.0, 1e9});
    REQUIRE(table.percent.size() == 2);
    for (const auto& layer : table.percent) {
        // tau = 1e9 catches everything
        CHECK(layer.back() == 100.0);
        // a relu layer with any positive activation stays below 100% near 0
        CHECK(layer.front() < 100.0);
        for (std::size_t t = 1; t < layer.size(); ++t) CHECK(layer[t] >= layer[t - 1]);
        for (double p : layer) {
            CHECK(p >= 0.0);
            CHECK(p <= 100.0);
        }
    }
    LabeledDataset empty;
    empty.kind = LabeledDataset::Kind::features;
    empty.feature_dim = 4;
    CHECK_THROWS_AS(activation_sparsity_profile(*model, empty, {1.0}), DataError);
    CHECK_THROWS_AS(activation_sparsity_profile(*model, ds, {-1.0}), ConfigError);
}

TEST_CASE("sequence attribution averages positions") {
    TinySeqConfig c;
    c.vocab_size = 4;
    c.embed_dim = 4;
    c.num_layers = 1;
    c.hidden_dim = 5;
    c.context_len = 6;
    auto model = init_tinyseq(c, 33);
    Batch b;
    b.size = 1;
    b.seq_len = 6;
    b.tokens = {0, 1, 2, 3, 0, 1};
    b.labels = {2};
    const auto g = per_sample_importance(*model, b, OutputReduction::task_loss);
    CHECK(g.size() == 5);
    for (double v : g) CHECK(std::isfinite(v));
}
