#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "flexkd/error.hpp"
#include "flexkd/losses.hpp"
#include "test_util.hpp"

using namespace flexkd;
using testutil::fd_grad;
using testutil::max_rel_err;
using testutil::random_vec;

namespace {

// One-line independent evaluation of the per-column correlation statistic.
double corr_oracle(const std::vector<double>& t, const std::vector<double>& s) {
    double dot = 0, nt = 0, ns = 0;
    for (std::size_t i = 0; i < t.size(); ++i) {
        dot += t[i] * s[i];
        nt += t[i] * t[i];
        ns += s[i] * s[i];
    }
    return dot / (std::sqrt(nt) * std::sqrt(ns));
}

// Brute-force evaluation of the selected-column correlation loss.
double flex_oracle(const std::vector<double>& teacher, const std::vector<double>& student,
                   std::size_t n, std::size_t d_t, std::size_t d_s,
                   const std::vector<int>& sel) {
    double loss = 0.0;
    for (std::size_t m = 0; m < d_s; ++m) {
        std::vector<double> tc(n), sc(n);
        for (std::size_t i = 0; i < n; ++i) {
            tc[i] = teacher[i * d_t + static_cast<std::size_t>(sel[m])];
            sc[i] = student[i * d_s + m];
        }
        const double c = corr_oracle(tc, sc);
        loss += (1.0 - c) * (1.0 - c);
    }
    return loss;
}

double flex_loss_value(const std::vector<double>& teacher, const std::vector<double>& student,
                       std::size_t n, std::size_t d_t, std::size_t d_s,
                       const std::vector<int>& sel) {
    Tape tape;
    Tensor t = Tensor::from({n, d_t}, teacher);
    Tensor s = Tensor::from({n, d_s}, student);
    return flex_kd_loss(tape, t, s, sel).item();
}

std::vector<double> teacher_selected(const std::vector<double>& teacher,
                                     const std::vector<int>& sel, std::size_t n,
                                     std::size_t d_t) {
    std::vector<double> out(n * sel.size());
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t m = 0; m < sel.size(); ++m) {
            out[i * sel.size() + m] = teacher[i * d_t + static_cast<std::size_t>(sel[m])];
        }
    }
    return out;
}

}  // namespace

TEST_CASE("cross correlation examples and oracle") {
    CHECK(cross_correlation({1, 2, 3}, {2, 4, 6}) == doctest::Approx(1.0).epsilon(1e-14));
    CHECK(cross_correlation({1, 0}, {0, 1}) == 0.0);

    const std::vector<double> t = {1, 2, -1};
    const std::vector<double> s = {0.5, -1, 2};
    CHECK(std::fabs(cross_correlation(t, s) - corr_oracle(t, s)) < 1e-12);

    CorrStats stats;
    CHECK(cross_correlation({0, 0, 0}, {1, 2, 3}, &stats) == 0.0);
    CHECK(stats.zero_norm_columns == 1);
}

TEST_CASE("flex loss trivial cases") {
    Rng rng(41);
    const std::size_t n = 8, d_t = 16, d_s = 4;
    const std::vector<double> teacher = random_vec(rng, n * d_t);
    const std::vector<int> sel = {3, 11, 0, 7};

    // student equals the selected teacher columns -> loss 0
    std::vector<double> student(n * d_s);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t m = 0; m < d_s; ++m) {
            student[i * d_s + m] = teacher[i * d_t + static_cast<std::size_t>(sel[m])];
        }
    }
    CHECK(flex_loss_value(teacher, student, n, d_t, d_s, sel) < 1e-24);

    // orthogonal columns -> exactly one per term
    std::vector<double> t2(4 * 2, 0.0), s2(4 * 2, 0.0);
    t2[0 * 2 + 0] = 1.0;  // teacher col 0 supported on row 0
    t2[1 * 2 + 1] = 1.0;  // teacher col 1 supported on row 1
    s2[2 * 2 + 0] = 1.0;  // student col 0 supported on row 2
    s2[3 * 2 + 1] = 1.0;  // student col 1 supported on row 3
    CHECK(flex_loss_value(t2, s2, 4, 2, 2, {0, 1}) == 2.0);
}

TEST_CASE("flex loss matches brute force and finite differences") {
    Rng rng(43);
    const std::size_t n = 8, d_t = 16, d_s = 4;
    const std::vector<double> teacher = random_vec(rng, n * d_t);
    const std::vector<double> student = random_vec(rng, n * d_s);
    const std::vector<int> sel = {5, 2, 14, 9};

    CHECK(std::fabs(flex_loss_value(teacher, student, n, d_t, d_s, sel) -
                    flex_oracle(teacher, student, n, d_t, d_s, sel)) < 1e-12);

    Tape tape;
    Tensor t = Tensor::from({n, d_t}, teacher);
    Tensor s = Tensor::from({n, d_s}, student);
    Tensor loss = flex_kd_loss(tape, t, s, sel);
    tape.backward(loss);
    const auto fd = fd_grad(
        [&](const std::vector<double>& in) {
            return flex_loss_value(teacher, in, n, d_t, d_s, sel);
        },
        student);
    CHECK(max_rel_err(s.grad(), fd) < 1e-5);
}

TEST_CASE("flex loss centered variant gradient") {
    Rng rng(47);
    const std::size_t n = 6, d_t = 8, d_s = 3;
    const std::vector<double> teacher = random_vec(rng, n * d_t);
    const std::vector<double> student = random_vec(rng, n * d_s);
    const std::vector<int> sel = {1, 6, 4};
    auto value = [&](const std::vector<double>& in) {
        Tape t;
        Tensor tt = Tensor::from({n, d_t}, teacher);
        Tensor ss = Tensor::from({n, d_s}, in);
        return flex_kd_loss(t, tt, ss, sel, /*centered=*/true).item();
    };
    Tape tape;
    Tensor t = Tensor::from({n, d_t}, teacher);
    Tensor s = Tensor::from({n, d_s}, student);
    Tensor loss = flex_kd_loss(tape, t, s, sel, true);
    tape.backward(loss);
    CHECK(max_rel_err(s.grad(), fd_grad(value, student)) < 1e-5);
}

TEST_CASE("flex loss column scale invariance") {
    Rng rng(53);
    const std::size_t n = 10, d_t = 12, d_s = 5;
    const std::vector<double> teacher = random_vec(rng, n * d_t);
    std::vector<double> student = random_vec(rng, n * d_s);
    const std::vector<int> sel = {0, 3, 6, 9, 11};
    const double base = flex_loss_value(teacher, student, n, d_t, d_s, sel);

    std::vector<double> scaled = student;
    for (std::size_t i = 0; i < n; ++i) scaled[i * d_s + 2] *= 4.75;  // positive scaling
    CHECK(std::fabs(flex_loss_value(teacher, scaled, n, d_t, d_s, sel) - base) < 1e-12);

    // negative scaling flips C for that column
    Tape t1, t2;
    std::vector<double> flipped = student;
    for (std::size_t i = 0; i < n; ++i) flipped[i * d_s + 2] *= -1.0;
    const std::vector<double> t_sel = teacher_selected(teacher, sel, n, d_t);
    Tensor corr_pos =
        t1.corr_cols(Tensor::from({n, d_s}, t_sel), Tensor::from({n, d_s}, student));
    Tensor corr_neg =
        t2.corr_cols(Tensor::from({n, d_s}, t_sel), Tensor::from({n, d_s}, flipped));
    CHECK(corr_neg.values()[2] == doctest::Approx(-corr_pos.values()[2]).epsilon(1e-12));
}

TEST_CASE("flex loss term bounds") {
    Rng rng(59);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 4 + rng.below(8);
        const std::size_t d = 1 + rng.below(6);
        Tape tape;
        Tensor a = Tensor::from({n, d}, random_vec(rng, n * d));
        Tensor b = Tensor::from({n, d}, random_vec(rng, n * d));
        Tensor c = tape.corr_cols(a, b);
        for (double v : c.values()) {
            const double term = (1.0 - v) * (1.0 - v);
            CHECK(term >= 0.0);
            CHECK(term <= 4.0);
        }
    }
}

TEST_CASE("flex loss permutation sensitivity") {
    Rng rng(61);
    const std::size_t n = 8, d_t = 10, d_s = 4;
    const std::vector<double> teacher = random_vec(rng, n * d_t);
    const std::vector<double> student = random_vec(rng, n * d_s);
    std::vector<int> sel = {1, 4, 7, 9};
    const double base = flex_loss_value(teacher, student, n, d_t, d_s, sel);
    bool found_difference = false;
    std::vector<int> perm = sel;
    std::sort(perm.begin(), perm.end());
    do {
        if (perm == sel) continue;
        const double v = flex_loss_value(teacher, student, n, d_t, d_s, perm);
        if (std::fabs(v - base) > 1e-9) {
            found_difference = true;
            break;
        }
    } while (std::next_permutation(perm.begin(), perm.end()));
    CHECK(found_difference);
}

TEST_CASE("flex loss zero-norm student column") {
    const std::size_t n = 4, d_t = 3, d_s = 2;
    std::vector<double> teacher = {1, 2, 0, 2, 1, 0, 3, 4, 0, 4, 3, 0};
    std::vector<double> student(n * d_s, 0.0);
    for (std::size_t i = 0; i < n; ++i) student[i * d_s + 0] = 1.0;  // col 1 stays all-zero
    Tape tape;
    CorrStats stats;
    Tensor t = Tensor::from({n, d_t}, teacher);
    Tensor s = Tensor::from({n, d_s}, student, true);
    Tensor loss = flex_kd_loss(tape, t, s, {0, 1}, false, &stats);
    CHECK(stats.zero_norm_columns == 1);
    CHECK(std::isfinite(loss.item()));
    tape.backward(loss);  // never a NaN
    for (double g : s.grad()) CHECK(std::isfinite(g));
}

TEST_CASE("flex loss config errors") {
    Tape tape;
    Tensor t = Tensor::from({4, 6}, std::vector<double>(24, 1.0));
    Tensor s = Tensor::from({4, 2}, std::vector<double>(8, 1.0));
    CHECK_THROWS_AS(flex_kd_loss(tape, t, s, {0, 1, 2}), ConfigError);  // width mismatch
    CHECK_THROWS_AS(flex_kd_loss(tape, t, s, {0, 6}), ConfigError);    // index out of range
}

TEST_CASE("logit kd examples") {
    Rng rng(67);
    const std::size_t n = 4, c = 5;
    const std::vector<double> logits = random_vec(rng, n * c);
    for (LogitMode mode : {LogitMode::forward_kl, LogitMode::reverse_kl}) {
        Tape tape;
        Tensor t = Tensor::from({n, c}, logits);
        Tensor s = Tensor::from({n, c}, logits);
        CHECK(logit_kd_loss(tape, t, s, 2.0, mode).item() ==
              doctest::Approx(0.0).epsilon(1e-12));
    }
    // near one-hot teacher vs uniform student: KL -> ln 2 at T = 1
    Tape tape;
    Tensor t = Tensor::from({1, 2}, {20, -20});
    Tensor s = Tensor::from({1, 2}, {0, 0});
    CHECK(std::fabs(logit_kd_loss(tape, t, s, 1.0, LogitMode::forward_kl).item() -
                    std::log(2.0)) < 1e-3);
}

TEST_CASE("logit kd against a direct oracle") {
    Rng rng(71);
    const std::size_t n = 6, c = 4;
    const double temp = 2.5;
    const std::vector<double> tv = random_vec(rng, n * c);
    const std::vector<double> sv = random_vec(rng, n * c);

    auto softmax_of = [&](const std::vector<double>& x, std::size_t row) {
        std::vector<double> p(c);
        double mx = -1e300;
        for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, x[row * c + j] / temp);
        double z = 0;
        for (std::size_t j = 0; j < c; ++j) z += (p[j] = std::exp(x[row * c + j] / temp - mx));
        for (double& v : p) v /= z;
        return p;
    };
    double fwd = 0, rev = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const auto p = softmax_of(tv, i);
        const auto q = softmax_of(sv, i);
        for (std::size_t j = 0; j < c; ++j) {
            fwd += p[j] * (std::log(p[j]) - std::log(q[j]));
            rev += q[j] * (std::log(q[j]) - std::log(p[j]));
        }
    }
    fwd *= temp * temp / static_cast<double>(n);
    rev *= temp * temp / static_cast<double>(n);

    Tape t1, t2;
    CHECK(std::fabs(logit_kd_loss(t1, Tensor::from({n, c}, tv), Tensor::from({n, c}, sv), temp,
                                  LogitMode::forward_kl)
                        .item() -
                    fwd) < 1e-10);
    CHECK(std::fabs(logit_kd_loss(t2, Tensor::from({n, c}, tv), Tensor::from({n, c}, sv), temp,
                                  LogitMode::reverse_kl)
                        .item() -
                    rev) < 1e-10);
    CHECK(fwd >= 0.0);
    CHECK(rev >= 0.0);
}

TEST_CASE("logit kd gradient flows to the student side") {
    Rng rng(73);
    const std::size_t n = 3, c = 4;
    const std::vector<double> tv = random_vec(rng, n * c);
    const std::vector<double> sv = random_vec(rng, n * c);
    for (LogitMode mode : {LogitMode::forward_kl, LogitMode::reverse_kl}) {
        auto value = [&](const std::vector<double>& in) {
            Tape t;
            return logit_kd_loss(t, Tensor::from({n, c}, tv), Tensor::from({n, c}, in), 1.7,
                                 mode)
                .item();
        };
        Tape tape;
        Tensor t = Tensor::from({n, c}, tv);
        Tensor s = Tensor::from({n, c}, sv);
        Tensor loss = logit_kd_loss(tape, t, s, 1.7, mode);
        tape.backward(loss);
        CHECK(max_rel_err(s.grad(), fd_grad(value, sv)) < 1e-5);
    }
}

TEST_CASE("projector loss cases") {
    const std::size_t n = 4, d = 3;
    Rng rng(79);
    const std::vector<double> hidden = random_vec(rng, n * d);

    // identity projector, student == teacher -> zero mse
    ProjectorHead eye;
    std::vector<double> w(d * d, 0.0);
    for (std::size_t i = 0; i < d; ++i) w[i * d + i] = 1.0;
    eye.weight = Tensor::from({d, d}, w, true);
    Tape t1;
    Tensor th = Tensor::from({n, d}, hidden);
    Tensor sh = Tensor::from({n, d}, hidden);
    CHECK(projector_loss(t1, th, sh, eye, ProjectorMetric::mse).item() == 0.0);

    // zero projector -> mean of squared teacher activations
    ProjectorHead zero;
    zero.weight = Tensor::from({d, d}, std::vector<double>(d * d, 0.0), true);
    double mean_sq = 0;
    for (double v : hidden) mean_sq += v * v;
    mean_sq /= static_cast<double>(n * d);
    Tape t2;
    Tensor th2 = Tensor::from({n, d}, hidden);
    Tensor sh2 = Tensor::from({n, d}, hidden);
    CHECK(projector_loss(t2, th2, sh2, zero, ProjectorMetric::mse).item() ==
          doctest::Approx(mean_sq).epsilon(1e-14));
}

TEST_CASE("projector loss random oracle and gradients") {
    Rng rng(83);
    const std::size_t n = 5, d_t = 7, d_s = 3;
    const std::vector<double> th = random_vec(rng, n * d_t);
    const std::vector<double> sh = random_vec(rng, n * d_s);
    ProjectorHead head = make_projector_head(d_t, d_s, 17);
    const std::vector<double> wv = head.weight.values();

    // direct evaluation
    std::vector<double> projected(n * d_t, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d_t; ++j) {
            for (std::size_t k = 0; k < d_s; ++k) {
                projected[i * d_t + j] += sh[i * d_s + k] * wv[j * d_s + k];
            }
        }
    }
    double mse = 0;
    for (std::size_t i = 0; i < n * d_t; ++i) {
        mse += (projected[i] - th[i]) * (projected[i] - th[i]);
    }
    mse /= static_cast<double>(n * d_t);

    Tape tape;
    Tensor t = Tensor::from({n, d_t}, th);
    Tensor s = Tensor::from({n, d_s}, sh, true);
    Tensor loss = projector_loss(tape, t, s, head, ProjectorMetric::mse);
    CHECK(std::fabs(loss.item() - mse) < 1e-10);

    // gradient reaches both the student and the head
    tape.backward(loss);
    auto value_s = [&](const std::vector<double>& in) {
        Tape tt;
        return projector_loss(tt, Tensor::from({n, d_t}, th), Tensor::from({n, d_s}, in), head,
                              ProjectorMetric::mse)
            .item();
    };
    CHECK(max_rel_err(s.grad(), fd_grad(value_s, sh)) < 1e-5);
    auto value_w = [&](const std::vector<double>& in) {
        ProjectorHead h2;
        h2.weight = Tensor::from({d_t, d_s}, in, true);
        Tape tt;
        return projector_loss(tt, Tensor::from({n, d_t}, th), Tensor::from({n, d_s}, sh), h2,
                              ProjectorMetric::mse)
            .item();
    };
    CHECK(max_rel_err(head.weight.grad(), fd_grad(value_w, wv)) < 1e-5);

    // correlation metric matches the selected-column loss over all columns
    std::vector<int> all(d_t);
    for (std::size_t j = 0; j < d_t; ++j) all[j] = static_cast<int>(j);
    Tape t3;
    Tensor corr_loss = projector_loss(t3, Tensor::from({n, d_t}, th),
                                      Tensor::from({n, d_s}, sh), head,
                                      ProjectorMetric::correlation);
    double corr_oracle_total = 0;
    for (std::size_t j = 0; j < d_t; ++j) {
        std::vector<double> tc(n), pc(n);
        for (std::size_t i = 0; i < n; ++i) {
            tc[i] = th[i * d_t + j];
            pc[i] = projected[i * d_t + j];
        }
        const double cc = corr_oracle(tc, pc);
        corr_oracle_total += (1 - cc) * (1 - cc);
    }
    CHECK(std::fabs(corr_loss.item() - corr_oracle_total) < 1e-10);

    ProjectorHead bad;
    bad.weight = Tensor::from({d_s, d_t}, std::vector<double>(d_t * d_s, 0.0), true);
    Tape t4;
    CHECK_THROWS_AS(projector_loss(t4, Tensor::from({n, d_t}, th),
                                   Tensor::from({n, d_s}, sh), bad, ProjectorMetric::mse),
                    ConfigError);
}

TEST_CASE("composite loss wiring") {
    Tape tape;
    CompositeParts parts;
    parts.feature = Tensor::scalar(2.0);
    parts.logit = Tensor::scalar(3.0);
    parts.supervised = Tensor::scalar(5.0);

    LossWeights classification;  // alpha 0.5, beta 0, lambda 0.5 regime
    classification.alpha = 0.5;
    classification.beta = 0.0;
    classification.lambda = 0.5;
    CHECK(composite_loss(tape, parts, classification).item() ==
          (0.5 * 2.0 + 0.5 * 5.0));

    LossWeights generation;  // alpha 0.05, beta 1, lambda 1 regime
    generation.alpha = 0.05;
    generation.beta = 1.0;
    generation.lambda = 1.0;
    generation.logit_mode = LogitMode::reverse_kl;
    CHECK(composite_loss(tape, parts, generation).item() ==
          doctest::Approx(0.05 * 2.0 + 3.0 + 5.0).epsilon(1e-15));

    // degenerate weights reduce bit-exactly to the supervised term
    LossWeights ft;
    ft.alpha = 0.0;
    ft.beta = 0.0;
    ft.lambda = 1.0;
    CHECK(composite_loss(tape, parts, ft).item() == 5.0);

    CompositeParts missing;
    missing.supervised = Tensor::scalar(1.0);
    CHECK_THROWS_AS(composite_loss(tape, missing, classification), ConfigError);

    LossWeights zeros;
    zeros.alpha = zeros.beta = zeros.lambda = 0.0;
    CHECK_THROWS_AS(composite_loss(tape, parts, zeros), ConfigError);
}
