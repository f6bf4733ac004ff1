#include "flexkd/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "flexkd/encoding.hpp"
#include "flexkd/error.hpp"
#include "flexkd/rng.hpp"

namespace flexkd {

using nlohmann::json;

std::string LabeledDataset::checksum() const {
    Fnv1a h;
    h.update_u64(kind == Kind::features ? 0 : 1);
    h.update_u64(feature_dim);
    h.update_u64(seq_len);
    h.update_u64(num_classes);
    h.update_doubles(features);
    for (int t : tokens) h.update_u64(static_cast<std::uint64_t>(t));
    for (int l : labels) h.update_u64(static_cast<std::uint64_t>(l));
    return "fnv1a:" + h.hex_digest();
}

Batch make_batch(const LabeledDataset& ds, const std::vector<std::size_t>& idx) {
    Batch b;
    b.size = idx.size();
    b.labels.reserve(idx.size());
    if (ds.is_sequence()) {
        b.seq_len = ds.seq_len;
        b.tokens.reserve(idx.size() * ds.seq_len);
        for (std::size_t i : idx) {
            const int* row = ds.tokens.data() + i * ds.seq_len;
            b.tokens.insert(b.tokens.end(), row, row + ds.seq_len);
            b.labels.push_back(ds.labels[i]);
        }
    } else {
        b.feature_dim = ds.feature_dim;
        b.features.reserve(idx.size() * ds.feature_dim);
        for (std::size_t i : idx) {
            const double* row = ds.features.data() + i * ds.feature_dim;
            b.features.insert(b.features.end(), row, row + ds.feature_dim);
            b.labels.push_back(ds.labels[i]);
        }
    }
    return b;
}

Batch single_batch(const LabeledDataset& ds, std::size_t i) {
    return make_batch(ds, {i});
}

Batch full_batch(const LabeledDataset& ds) {
    std::vector<std::size_t> idx(ds.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    return make_batch(ds, idx);
}

// ---------------------------------------------------------------------------
// planted-relevance task
// ---------------------------------------------------------------------------

void PlantedRelevanceSpec::validate() const {
    if (d_input < 1) throw ConfigError("planted: d_input must be >= 1");
    if (num_relevant < 1 || num_relevant > d_input) {
        throw ConfigError("planted: num_relevant must be in [1, d_input]");
    }
    if (noise_scale < 0.0) throw ConfigError("planted: noise_scale must be >= 0");
    if (num_classes < 2) throw ConfigError("planted: num_classes must be >= 2");
    if (train_size < 1 || test_size < 1) throw ConfigError("planted: empty split");
}

std::vector<double> PlantedRule::class_scores(const std::vector<double>& features,
                                              std::size_t d_input) const {
    if (features.size() != d_input) {
        throw DataError("planted rule: feature row has wrong width");
    }
    const std::size_t k = relevant.size();
    std::vector<double> u(map_dim);
    for (std::size_t q = 0; q < map_dim; ++q) {
        double acc = a_bias[q];
        for (std::size_t i = 0; i < k; ++i) {
            acc += a_weight[i * map_dim + q] * features[static_cast<std::size_t>(relevant[i])];
        }
        u[q] = std::tanh(acc);
    }
    const std::size_t cols = num_classes == 2 ? 1 : num_classes;
    std::vector<double> s(cols, 0.0);
    for (std::size_t c = 0; c < cols; ++c) {
        for (std::size_t q = 0; q < map_dim; ++q) s[c] += b_weight[q * cols + c] * u[q];
    }
    return s;
}

int PlantedRule::label(const std::vector<double>& features, std::size_t d_input) const {
    const std::vector<double> s = class_scores(features, d_input);
    if (num_classes == 2) return s[0] > offsets[0] ? 1 : 0;
    int best = 0;
    double best_v = -1e300;
    for (std::size_t c = 0; c < num_classes; ++c) {
        const double v = s[c] - offsets[c];
        if (v > best_v) {
            best_v = v;
            best = static_cast<int>(c);
        }
    }
    return best;
}

namespace {

LabeledDataset planted_split(const PlantedRelevanceSpec& spec, const PlantedRule& rule, Rng& rng,
                             std::size_t n, const std::string& tag) {
    LabeledDataset ds;
    ds.kind = LabeledDataset::Kind::features;
    ds.feature_dim = spec.d_input;
    ds.num_classes = spec.num_classes;
    ds.split_tag = tag;
    ds.features.resize(n * spec.d_input);
    ds.labels.resize(n);
    std::vector<char> is_relevant(spec.d_input, 0);
    for (int r : rule.relevant) is_relevant[static_cast<std::size_t>(r)] = 1;
    std::vector<double> row(spec.d_input);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < spec.d_input; ++j) {
            const double z = rng.normal();
            row[j] = is_relevant[j] ? z : spec.noise_scale * z;
        }
        std::copy(row.begin(), row.end(), ds.features.begin() + i * spec.d_input);
        ds.labels[i] = rule.label(row, spec.d_input);
    }
    return ds;
}

}  // namespace

DatasetBundle gen_planted_task(const PlantedRelevanceSpec& spec) {
    spec.validate();
    Rng rng(Rng::derive(spec.seed, 0x9a17));

    PlantedRule rule;
    rule.num_classes = spec.num_classes;
    rule.map_dim = std::max<std::size_t>(2 * spec.num_relevant, 8);
    {
        std::vector<std::size_t> perm = rng.permutation(spec.d_input);
        perm.resize(spec.num_relevant);
        std::sort(perm.begin(), perm.end());
        for (std::size_t p : perm) rule.relevant.push_back(static_cast<int>(p));
    }
    const std::size_t k = spec.num_relevant, q = rule.map_dim;
    rule.a_weight.resize(k * q);
    rule.a_bias.resize(q);
    const double a_scale = 1.5 / std::sqrt(static_cast<double>(k));
    for (double& v : rule.a_weight) v = a_scale * rng.normal();
    for (double& v : rule.a_bias) v = 0.3 * rng.normal();
    const std::size_t b_cols = spec.num_classes == 2 ? 1 : spec.num_classes;
    rule.b_weight.resize(q * b_cols);
    for (double& v : rule.b_weight) v = rng.normal() / std::sqrt(static_cast<double>(q));
    rule.offsets.assign(spec.num_classes == 2 ? 1 : spec.num_classes, 0.0);

    DatasetBundle bundle;
    bundle.seed = spec.seed;
    bundle.has_rule = true;
    bundle.train = planted_split(spec, rule, rng, spec.train_size, "train");

    // Calibrate the decision offsets on the train pool so classes balance,
    // then relabel the pool; the offsets remain functions of the relevant
    // coordinates only.
    std::vector<std::vector<double>> pool_scores(spec.train_size);
    for (std::size_t i = 0; i < spec.train_size; ++i) {
        std::vector<double> row(bundle.train.features.begin() + i * spec.d_input,
                                bundle.train.features.begin() + (i + 1) * spec.d_input);
        pool_scores[i] = rule.class_scores(row, spec.d_input);
    }
    if (spec.num_classes == 2) {
        std::vector<double> sorted(spec.train_size);
        for (std::size_t i = 0; i < spec.train_size; ++i) sorted[i] = pool_scores[i][0];
        std::sort(sorted.begin(), sorted.end());
        const std::size_t mid = sorted.size() / 2;
        rule.offsets[0] =
            sorted.size() % 2 == 0 ? 0.5 * (sorted[mid - 1] + sorted[mid]) : sorted[mid];
    } else {
        // proportional fitting of per-class offsets
        double spread = 0.0, mean = 0.0;
        for (const auto& s : pool_scores) {
            for (double v : s) mean += v;
        }
        mean /= static_cast<double>(spec.train_size * spec.num_classes);
        for (const auto& s : pool_scores) {
            for (double v : s) spread += (v - mean) * (v - mean);
        }
        spread = std::sqrt(spread / static_cast<double>(spec.train_size * spec.num_classes));
        const double target = static_cast<double>(spec.train_size) /
                              static_cast<double>(spec.num_classes);
        for (int round = 0; round < 200; ++round) {
            std::vector<double> counts(spec.num_classes, 0.0);
            for (const auto& s : pool_scores) {
                int best = 0;
                double best_v = -1e300;
                for (std::size_t c = 0; c < spec.num_classes; ++c) {
                    if (s[c] - rule.offsets[c] > best_v) {
                        best_v = s[c] - rule.offsets[c];
                        best = static_cast<int>(c);
                    }
                }
                counts[static_cast<std::size_t>(best)] += 1.0;
            }
            for (std::size_t c = 0; c < spec.num_classes; ++c) {
                rule.offsets[c] += spread * (counts[c] - target) /
                                   static_cast<double>(spec.train_size);
            }
        }
    }
    for (std::size_t i = 0; i < spec.train_size; ++i) {
        std::vector<double> row(bundle.train.features.begin() + i * spec.d_input,
                                bundle.train.features.begin() + (i + 1) * spec.d_input);
        bundle.train.labels[i] = rule.label(row, spec.d_input);
    }
    if (spec.val_size > 0) bundle.val = planted_split(spec, rule, rng, spec.val_size, "val");
    bundle.test = planted_split(spec, rule, rng, spec.test_size, "test");
    bundle.planted_relevant = rule.relevant;
    bundle.rule = rule;
    {
        std::ostringstream p;
        p << "planted(d=" << spec.d_input << ",k=" << spec.num_relevant
          << ",noise=" << spec.noise_scale << ",classes=" << spec.num_classes << ")";
        bundle.provenance = p.str();
    }
    return bundle;
}

// ---------------------------------------------------------------------------
// sequence tasks
// ---------------------------------------------------------------------------

SeqRule seq_rule_from_string(const std::string& s) {
    if (s == "majority" || s == "majority-token") return SeqRule::majority_token;
    if (s == "parity" || s == "parity-of-marker") return SeqRule::parity_of_marker;
    throw ConfigError("unknown sequence rule '" + s + "' (expected majority|parity)");
}

std::string to_string(SeqRule r) {
    return r == SeqRule::majority_token ? "majority" : "parity";
}

void SeqTaskSpec::validate() const {
    if (context_len < 2) throw ConfigError("sequence task: context_len must be >= 2");
    if (vocab_size < 2) throw ConfigError("sequence task: vocab_size must be >= 2");
    if (train_size < 1 || test_size < 1) throw ConfigError("sequence task: empty split");
}

int seq_label(SeqRule rule, const std::vector<int>& tokens, std::size_t vocab_size) {
    if (rule == SeqRule::majority_token) {
        std::vector<int> counts(vocab_size, 0);
        for (int t : tokens) ++counts[static_cast<std::size_t>(t)];
        int best = 0;
        for (std::size_t c = 1; c < vocab_size; ++c) {
            if (counts[c] > counts[static_cast<std::size_t>(best)]) best = static_cast<int>(c);
        }
        return best;  // ties resolve to the lowest token id
    }
    int markers = 0;
    for (int t : tokens) {
        if (t == kParityMarkerToken) ++markers;
    }
    return markers % 2;  // 0 = even
}

namespace {

LabeledDataset seq_split(const SeqTaskSpec& spec, Rng& rng, std::size_t n,
                         const std::string& tag) {
    LabeledDataset ds;
    ds.kind = LabeledDataset::Kind::sequences;
    ds.seq_len = spec.context_len;
    ds.num_classes = spec.rule == SeqRule::majority_token ? spec.vocab_size : 2;
    ds.split_tag = tag;
    ds.tokens.resize(n * spec.context_len);
    ds.labels.resize(n);
    const std::size_t L = spec.context_len;
    std::vector<int> seq(L);
    for (std::size_t i = 0; i < n; ++i) {
        if (spec.rule == SeqRule::majority_token) {
            // Round-robin target class with a guaranteed strict majority.
            const int target = static_cast<int>(i % spec.vocab_size);
            const std::size_t majority = L / 2 + 1;
            for (std::size_t p = 0; p < L; ++p) {
                if (p < majority) {
                    seq[p] = target;
                } else {
                    int other = static_cast<int>(rng.below(spec.vocab_size - 1));
                    if (other >= target) ++other;
                    seq[p] = other;
                }
            }
            rng.shuffle(seq);
        } else {
            const int parity = static_cast<int>(i % 2);
            const std::size_t max_m = L;
            std::vector<int> valid;
            for (std::size_t m = static_cast<std::size_t>(parity); m <= max_m; m += 2) {
                valid.push_back(static_cast<int>(m));
            }
            const int m = valid[rng.below(valid.size())];
            for (std::size_t p = 0; p < L; ++p) {
                int tok = static_cast<int>(rng.below(spec.vocab_size - 1));
                if (tok >= kParityMarkerToken) ++tok;
                seq[p] = tok;
            }
            std::vector<std::size_t> pos = rng.permutation(L);
            for (int j = 0; j < m; ++j) seq[pos[static_cast<std::size_t>(j)]] = kParityMarkerToken;
        }
        std::copy(seq.begin(), seq.end(), ds.tokens.begin() + i * L);
        ds.labels[i] = seq_label(spec.rule, seq, spec.vocab_size);
    }
    return ds;
}

}  // namespace

DatasetBundle gen_seq_task(const SeqTaskSpec& spec) {
    spec.validate();
    Rng rng(Rng::derive(spec.seed, 0x5e9));
    DatasetBundle bundle;
    bundle.seed = spec.seed;
    bundle.train = seq_split(spec, rng, spec.train_size, "train");
    if (spec.val_size > 0) bundle.val = seq_split(spec, rng, spec.val_size, "val");
    bundle.test = seq_split(spec, rng, spec.test_size, "test");
    std::ostringstream p;
    p << "sequence(rule=" << to_string(spec.rule) << ",vocab=" << spec.vocab_size
      << ",len=" << spec.context_len << ")";
    bundle.provenance = p.str();
    return bundle;
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cell;
    for (char c : line) {
        if (c == ',') {
            cells.push_back(cell);
            cell.clear();
        } else if (c != '\r') {
            cell.push_back(c);
        }
    }
    cells.push_back(cell);
    return cells;
}

}  // namespace

LabeledDataset load_csv(const std::filesystem::path& path, const CsvSchema& schema) {
    if (schema.num_classes < 2) throw ConfigError("csv schema: num_classes must be >= 2");
    std::ifstream in(path);
    if (!in) throw DataError("cannot open csv file " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw DataError(path.string() + ": missing header row");
    const std::vector<std::string> header = split_csv_line(line);

    std::vector<std::string> feature_columns = schema.feature_columns;
    if (feature_columns.empty()) {
        for (const std::string& h : header) {
            if (h != schema.label_column) feature_columns.push_back(h);
        }
    }
    std::vector<std::size_t> feature_idx;
    for (const std::string& name : feature_columns) {
        const auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end()) {
            throw DataError(path.string() + ": header misses feature column '" + name + "'");
        }
        feature_idx.push_back(static_cast<std::size_t>(it - header.begin()));
    }
    const auto label_it = std::find(header.begin(), header.end(), schema.label_column);
    if (label_it == header.end()) {
        throw DataError(path.string() + ": header misses label column '" + schema.label_column +
                        "'");
    }
    const std::size_t label_idx = static_cast<std::size_t>(label_it - header.begin());

    LabeledDataset ds;
    ds.kind = LabeledDataset::Kind::features;
    ds.feature_dim = feature_idx.size();
    ds.num_classes = schema.num_classes;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const std::vector<std::string> cells = split_csv_line(line);
        if (cells.size() != header.size()) {
            throw DataError(path.string() + ": line " + std::to_string(line_no) + " has " +
                            std::to_string(cells.size()) + " cells, header has " +
                            std::to_string(header.size()));
        }
        for (std::size_t f : feature_idx) {
            const std::string& cell = cells[f];
            double v = 0.0;
            const auto res = std::from_chars(cell.data(), cell.data() + cell.size(), v);
            if (res.ec != std::errc{} || res.ptr != cell.data() + cell.size() ||
                !std::isfinite(v)) {
                throw DataError(path.string() + ": line " + std::to_string(line_no) +
                                ": non-numeric feature cell '" + cell + "'");
            }
            ds.features.push_back(v);
        }
        const std::string& lab = cells[label_idx];
        int label = -1;
        const auto res = std::from_chars(lab.data(), lab.data() + lab.size(), label);
        if (res.ec != std::errc{} || res.ptr != lab.data() + lab.size() || label < 0 ||
            static_cast<std::size_t>(label) >= schema.num_classes) {
            throw DataError(path.string() + ": line " + std::to_string(line_no) +
                            ": unknown label '" + lab + "'");
        }
        ds.labels.push_back(label);
    }
    if (ds.labels.empty()) throw DataError(path.string() + ": no data rows");
    return ds;
}

void save_csv(const LabeledDataset& ds, const std::filesystem::path& path) {
    if (ds.is_sequence()) throw DataError("save_csv: sequence datasets are not csv-exportable");
    std::ofstream out(path);
    if (!out) throw DataError("cannot write csv file " + path.string());
    for (std::size_t j = 0; j < ds.feature_dim; ++j) out << "f" << j << ",";
    out << "label\n";
    char buf[64];
    for (std::size_t i = 0; i < ds.size(); ++i) {
        for (std::size_t j = 0; j < ds.feature_dim; ++j) {
            const double v = ds.features[i * ds.feature_dim + j];
            const auto res = std::to_chars(buf, buf + sizeof(buf), v);
            out.write(buf, res.ptr - buf);
            out.put(',');
        }
        out << ds.labels[i] << "\n";
    }
}

// ---------------------------------------------------------------------------

json DatasetBundle::manifest() const {
    return json{{"provenance", provenance},
                {"seed", seed},
                {"sizes",
                 {{"train", train.size()}, {"val", val.size()}, {"test", test.size()}}},
                {"split_checksums",
                 {{"train", train.checksum()},
                  {"val", val.size() ? val.checksum() : ""},
                  {"test", test.checksum()}}}};
}

}  // namespace flexkd
