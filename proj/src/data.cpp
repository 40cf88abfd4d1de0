#include "cbm/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "cbm/errors.hpp"

namespace cbm {

namespace {

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string fmt_frac(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%g", v);
    return buf;
}

}  // namespace

void GeneratorSpec::validate() const {
    if (num_classes < 1 || num_concepts < 1 || input_dim < 1 || samples_per_class < 1)
        throw ValueError("GeneratorSpec: all dimensions must be >= 1");
    if (!(concept_flip_prob >= 0.0 && concept_flip_prob <= 1.0))
        throw ValueError("GeneratorSpec: concept_flip_prob must be in [0,1]");
    if (input_noise_sigma < 0.0) throw ValueError("GeneratorSpec: input_noise_sigma must be >= 0");
    if (concept_map.shape() != Shape{num_classes, num_concepts})
        throw ValueError("GeneratorSpec: concept_map shape " + shape_str(concept_map.shape()) +
                         " does not match K x a");
    if (mixing.shape() != Shape{input_dim, num_concepts})
        throw ValueError("GeneratorSpec: mixing shape " + shape_str(mixing.shape()) +
                         " does not match m x a");
    for (std::size_t i = 0; i < num_classes; ++i)
        for (std::size_t j = i + 1; j < num_classes; ++j) {
            bool same = true;
            for (std::size_t a = 0; a < num_concepts; ++a)
                if (concept_map.at(i, a) != concept_map.at(j, a)) {
                    same = false;
                    break;
                }
            if (same)
                throw ValueError("GeneratorSpec: concept_map rows " + std::to_string(i) + " and " +
                                 std::to_string(j) + " are identical; classes must be distinguishable");
        }
}

GeneratorSpec GeneratorSpec::make(std::size_t num_classes, std::size_t num_concepts,
                                  std::size_t input_dim, double concept_flip_prob,
                                  double input_noise_sigma, std::size_t samples_per_class,
                                  RngState& rng) {
    GeneratorSpec spec;
    spec.num_classes = num_classes;
    spec.num_concepts = num_concepts;
    spec.input_dim = input_dim;
    spec.concept_flip_prob = concept_flip_prob;
    spec.input_noise_sigma = input_noise_sigma;
    spec.samples_per_class = samples_per_class;

    // Distinct codes of weight a/2 (dot-product separable).
    const std::size_t weight = std::max<std::size_t>(1, num_concepts / 2);
    std::set<std::vector<std::uint8_t>> seen;
    spec.concept_map = Tensor(Shape{num_classes, num_concepts});
    for (std::size_t k = 0; k < num_classes; ++k) {
        std::vector<std::uint8_t> code(num_concepts, 0);
        do {
            std::fill(code.begin(), code.end(), 0);
            std::size_t placed = 0;
            while (placed < weight) {
                const std::size_t pos = rng.uniform_int(num_concepts);
                if (!code[pos]) {
                    code[pos] = 1;
                    ++placed;
                }
            }
        } while (seen.count(code));
        seen.insert(code);
        for (std::size_t a = 0; a < num_concepts; ++a) spec.concept_map.at(k, a) = code[a];
    }

    spec.mixing = Tensor(Shape{input_dim, num_concepts});
    for (std::size_t i = 0; i < spec.mixing.size(); ++i) spec.mixing[i] = rng.normal();
    spec.validate();
    return spec;
}

GeneratorSpec default_generator_spec(RngState& rng) {
    return GeneratorSpec::make(10, 16, 32, 0.1, 1.0, 200, rng);
}

void LabeledDataset::validate() const {
    const std::size_t n = y.size();
    if (x.ndim() != 2 || c.ndim() != 2 || x.rows() != n || c.rows() != n)
        throw ValueError("LabeledDataset: misaligned x/c/y lengths");
    for (int label : y)
        if (label < 0 || static_cast<std::size_t>(label) >= num_classes)
            throw ValueError("LabeledDataset: label " + std::to_string(label) + " out of range");
    if (concepts_binary)
        for (std::size_t i = 0; i < c.size(); ++i)
            if (c[i] != 0.0 && c[i] != 1.0)
                throw ValueError("LabeledDataset: non-binary concept value " + std::to_string(c[i]));
}

SplitSizes default_split_sizes(const GeneratorSpec& spec) {
    const std::size_t train = spec.num_classes * spec.samples_per_class;
    return SplitSizes{train, std::max<std::size_t>(spec.num_classes, train / 8), train / 2};
}

LabeledDataset generate_split(const GeneratorSpec& spec, std::size_t n, const std::string& split_tag,
                              RngState& rng) {
    spec.validate();
    if (n < 1) throw ValueError("generate: split size must be >= 1");
    LabeledDataset ds;
    ds.num_classes = spec.num_classes;
    ds.split = split_tag;
    ds.x = Tensor(Shape{n, spec.input_dim});
    ds.c = Tensor(Shape{n, spec.num_concepts});
    ds.y.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t k = rng.uniform_int(spec.num_classes);
        ds.y[i] = static_cast<int>(k);
        for (std::size_t a = 0; a < spec.num_concepts; ++a) {
            double bit = spec.concept_map.at(k, a);
            if (spec.concept_flip_prob > 0.0 && rng.bernoulli(spec.concept_flip_prob)) bit = 1.0 - bit;
            ds.c.at(i, a) = bit;
        }
        for (std::size_t j = 0; j < spec.input_dim; ++j) {
            double v = 0.0;
            for (std::size_t a = 0; a < spec.num_concepts; ++a)
                v += spec.mixing.at(j, a) * ds.c.at(i, a);
            if (spec.input_noise_sigma > 0.0) v += spec.input_noise_sigma * rng.normal();
            ds.x.at(i, j) = v;
        }
    }
    ds.provenance.push_back("generate(split=" + split_tag + ", n=" + std::to_string(n) + ")");
    return ds;
}

DataSplits generate(const GeneratorSpec& spec, const SplitSizes& sizes, RngState& rng) {
    DataSplits splits;
    RngState train_rng = rng.derive(1);
    RngState val_rng = rng.derive(2);
    RngState test_rng = rng.derive(3);
    splits.train = generate_split(spec, sizes.train, "train", train_rng);
    splits.val = generate_split(spec, sizes.val, "val", val_rng);
    splits.test = generate_split(spec, sizes.test, "test_in", test_rng);
    return splits;
}

// --- spurious correlation ---

SpuriousShift::SpuriousShift(std::size_t num_classes, std::size_t block_width, RngState& rng) {
    if (num_classes < 2) throw ValueError("SpuriousShift: need at least 2 classes");
    if (block_width < 1) throw ValueError("SpuriousShift: block_width must be >= 1");
    signatures_ = Tensor(Shape{num_classes, block_width});
    for (std::size_t i = 0; i < signatures_.size(); ++i) signatures_[i] = rng.normal();
}

LabeledDataset SpuriousShift::apply(const LabeledDataset& ds, double p, RngState& rng) const {
    if (!(p >= 0.0 && p <= 1.0)) throw ValueError("SpuriousShift: p must be in [0,1]");
    const std::size_t n = ds.size(), m = ds.num_features(), w = signatures_.cols();
    const std::size_t num_classes = signatures_.rows();
    if (ds.num_classes != num_classes)
        throw ValueError("SpuriousShift: dataset has " + std::to_string(ds.num_classes) +
                         " classes, signatures have " + std::to_string(num_classes));
    LabeledDataset out = ds;
    out.x = Tensor(Shape{n, m + w});
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < m; ++j) out.x.at(i, j) = ds.x.at(i, j);
        std::size_t sig_class = static_cast<std::size_t>(ds.y[i]);
        if (!rng.bernoulli(p)) {
            // signature of a uniformly drawn *other* class
            std::size_t other = rng.uniform_int(num_classes - 1);
            if (other >= sig_class) ++other;
            sig_class = other;
        }
        for (std::size_t j = 0; j < w; ++j) out.x.at(i, m + j) = signatures_.at(sig_class, j);
    }
    out.provenance.push_back("spurious(p=" + fmt_frac(p) + ", width=" + std::to_string(w) + ")");
    return out;
}

// --- corruptions ---

CorruptionKind corruption_from_string(const std::string& name) {
    if (name == "gaussian_noise") return CorruptionKind::gaussian_noise;
    if (name == "blur") return CorruptionKind::blur;
    if (name == "zoom_blur") return CorruptionKind::zoom_blur;
    if (name == "snow") return CorruptionKind::snow;
    if (name == "fog") return CorruptionKind::fog;
    if (name == "brightness") return CorruptionKind::brightness;
    if (name == "contrast") return CorruptionKind::contrast;
    throw ValueError("apply_corruption: unknown kind '" + name + "'");
}

std::string corruption_name(CorruptionKind kind) {
    switch (kind) {
        case CorruptionKind::gaussian_noise: return "gaussian_noise";
        case CorruptionKind::blur: return "blur";
        case CorruptionKind::zoom_blur: return "zoom_blur";
        case CorruptionKind::snow: return "snow";
        case CorruptionKind::fog: return "fog";
        case CorruptionKind::brightness: return "brightness";
        case CorruptionKind::contrast: return "contrast";
    }
    throw ValueError("apply_corruption: bad kind enum");
}

namespace {

void corrupt_row(double* row, std::size_t m, CorruptionKind kind, double severity, RngState& rng) {
    switch (kind) {
        case CorruptionKind::gaussian_noise: {
            for (std::size_t j = 0; j < m; ++j) row[j] += severity * rng.normal();
            break;
        }
        case CorruptionKind::blur: {
            const long half = std::lround(severity);
            if (half <= 0) break;
            std::vector<double> src(row, row + m);
            for (std::size_t j = 0; j < m; ++j) {
                double acc = 0.0;
                std::size_t cnt = 0;
                for (long o = -half; o <= half; ++o) {
                    const long idx = static_cast<long>(j) + o;
                    if (idx < 0 || idx >= static_cast<long>(m)) continue;
                    acc += src[idx];
                    ++cnt;
                }
                row[j] = acc / static_cast<double>(cnt);
            }
            break;
        }
        case CorruptionKind::zoom_blur: {
            const long copies = std::lround(severity);
            if (copies <= 0) break;
            std::vector<double> src(row, row + m);
            for (std::size_t j = 0; j < m; ++j) {
                double acc = src[j];
                for (long k = 1; k <= copies; ++k) {
                    const double factor = 1.0 + 0.1 * static_cast<double>(k);
                    const std::size_t idx = std::min(
                        m - 1, static_cast<std::size_t>(std::floor(static_cast<double>(j) / factor)));
                    acc += src[idx];
                }
                row[j] = acc / static_cast<double>(copies + 1);
            }
            break;
        }
        case CorruptionKind::snow: {
            const double frac = std::clamp(severity, 0.0, 1.0);
            if (frac == 0.0) break;
            const auto k = static_cast<std::size_t>(std::floor(frac * static_cast<double>(m)));
            if (k == 0) break;
            std::vector<std::size_t> idx(m);
            std::iota(idx.begin(), idx.end(), 0);
            // Fisher-Yates prefix: first k zeroed, next k brightened
            for (std::size_t j = 0; j < std::min(2 * k, m); ++j) {
                const std::size_t pick = j + rng.uniform_int(m - j);
                std::swap(idx[j], idx[pick]);
            }
            for (std::size_t j = 0; j < k; ++j) row[idx[j]] = 0.0;
            for (std::size_t j = k; j < std::min(2 * k, m); ++j) row[idx[j]] += 1.0;
            break;
        }
        case CorruptionKind::fog: {
            double mean = 0.0;
            for (std::size_t j = 0; j < m; ++j) mean += row[j];
            mean /= static_cast<double>(m);
            for (std::size_t j = 0; j < m; ++j) row[j] = (1.0 - severity) * row[j] + severity * mean;
            break;
        }
        case CorruptionKind::brightness: {
            for (std::size_t j = 0; j < m; ++j) row[j] += severity;
            break;
        }
        case CorruptionKind::contrast: {
            double mean = 0.0;
            for (std::size_t j = 0; j < m; ++j) mean += row[j];
            mean /= static_cast<double>(m);
            for (std::size_t j = 0; j < m; ++j) row[j] = mean + (1.0 + severity) * (row[j] - mean);
            break;
        }
    }
}

}  // namespace

LabeledDataset apply_corruption(const LabeledDataset& ds, CorruptionKind kind, double severity,
                                RngState& rng) {
    if (severity < 0.0) throw ValueError("apply_corruption: severity must be >= 0");
    LabeledDataset out = ds;
    if (severity > 0.0) {
        const std::size_t m = ds.num_features();
        for (std::size_t i = 0; i < out.size(); ++i)
            corrupt_row(out.x.data().data() + i * m, m, kind, severity, rng);
    }
    out.provenance.push_back("corruption(kind=" + corruption_name(kind) +
                             ", severity=" + fmt_frac(severity) + ")");
    return out;
}

// --- concept noise ---

LabeledDataset apply_concept_noise(const LabeledDataset& ds, std::size_t num_groups,
                                   const std::vector<double>& sigma_levels, RngState& rng) {
    if (num_groups < 1 || ds.num_classes % num_groups != 0)
        throw ValueError("apply_concept_noise: " + std::to_string(ds.num_classes) +
                         " classes cannot be split into " + std::to_string(num_groups) +
                         " contiguous groups");
    if (sigma_levels.size() != num_groups)
        throw ValueError("apply_concept_noise: " + std::to_string(sigma_levels.size()) +
                         " sigma levels for " + std::to_string(num_groups) + " groups");
    for (double s : sigma_levels)
        if (s < 0.0) throw ValueError("apply_concept_noise: sigma must be >= 0");
    const std::size_t group_size = ds.num_classes / num_groups;
    LabeledDataset out = ds;
    const std::size_t a = ds.num_concepts();
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double sigma = sigma_levels[static_cast<std::size_t>(out.y[i]) / group_size];
        if (sigma == 0.0) continue;
        for (std::size_t j = 0; j < a; ++j) out.c.at(i, j) += sigma * rng.normal();
    }
    out.concepts_binary = false;
    out.provenance.push_back("concept_noise(groups=" + std::to_string(num_groups) + ")");
    return out;
}

// --- sparsity / duplication ---

std::vector<std::size_t> choose_concept_subset(std::size_t num_concepts, double fraction,
                                               RngState& rng) {
    if (!(fraction > 0.0 && fraction <= 1.0))
        throw ValueError("subsample_concepts: fraction must be in (0,1], got " + fmt_frac(fraction));
    const auto keep = static_cast<std::size_t>(
        std::ceil(fraction * static_cast<double>(num_concepts)));
    std::vector<std::size_t> idx(num_concepts);
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t j = 0; j < keep; ++j) {
        const std::size_t pick = j + rng.uniform_int(num_concepts - j);
        std::swap(idx[j], idx[pick]);
    }
    idx.resize(keep);
    std::sort(idx.begin(), idx.end());
    return idx;
}

LabeledDataset keep_concepts(const LabeledDataset& ds, const std::vector<std::size_t>& columns) {
    const std::size_t n = ds.size();
    LabeledDataset out = ds;
    out.c = Tensor(Shape{n, columns.size()});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < columns.size(); ++j) {
            if (columns[j] >= ds.num_concepts())
                throw ValueError("keep_concepts: column " + std::to_string(columns[j]) + " out of range");
            out.c.at(i, j) = ds.c.at(i, columns[j]);
        }
    std::string cols;
    for (std::size_t j : columns) cols += (cols.empty() ? "" : " ") + std::to_string(j);
    out.provenance.push_back("subsample_concepts(kept=[" + cols + "])");
    return out;
}

LabeledDataset subsample_concepts(const LabeledDataset& ds, double fraction, RngState& rng) {
    return keep_concepts(ds, choose_concept_subset(ds.num_concepts(), fraction, rng));
}

std::vector<std::size_t> choose_duplicate_columns(std::size_t num_concepts, double fraction,
                                                  RngState& rng) {
    return choose_concept_subset(num_concepts, fraction, rng);  // same selection semantics
}

LabeledDataset append_concept_columns(const LabeledDataset& ds, const std::vector<std::size_t>& columns) {
    const std::size_t n = ds.size(), a = ds.num_concepts();
    LabeledDataset out = ds;
    out.c = Tensor(Shape{n, a + columns.size()});
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < a; ++j) out.c.at(i, j) = ds.c.at(i, j);
        for (std::size_t j = 0; j < columns.size(); ++j) {
            if (columns[j] >= a)
                throw ValueError("duplicate_concepts: column " + std::to_string(columns[j]) +
                                 " out of range");
            out.c.at(i, a + j) = ds.c.at(i, columns[j]);
        }
    }
    std::string cols;
    for (std::size_t j : columns) cols += (cols.empty() ? "" : " ") + std::to_string(j);
    out.provenance.push_back("duplicate_concepts(copied=[" + cols + "])");
    return out;
}

LabeledDataset duplicate_concepts(const LabeledDataset& ds, double fraction, RngState& rng) {
    return append_concept_columns(ds, choose_duplicate_columns(ds.num_concepts(), fraction, rng));
}

// --- CSV ---

void save_csv(const LabeledDataset& ds, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw ParseError("save_csv: cannot open " + path + " for writing");
    const std::size_t m = ds.num_features(), a = ds.num_concepts();
    for (std::size_t j = 0; j < m; ++j) out << "feature:f" << j << ",";
    for (std::size_t j = 0; j < a; ++j) out << "concept:c" << j << ",";
    out << "label\n";
    for (std::size_t i = 0; i < ds.size(); ++i) {
        for (std::size_t j = 0; j < m; ++j) out << fmt_double(ds.x.at(i, j)) << ",";
        for (std::size_t j = 0; j < a; ++j) {
            if (ds.concepts_binary)
                out << static_cast<int>(ds.c.at(i, j)) << ",";
            else
                out << fmt_double(ds.c.at(i, j)) << ",";
        }
        out << ds.y[i] << "\n";
    }
    if (!out) throw ParseError("save_csv: write failed for " + path);
}

namespace {

std::vector<std::string> split_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            fields.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur += ch;
        }
    }
    fields.push_back(cur);
    return fields;
}

double parse_double(const std::string& s, std::size_t line_no, const std::string& column) {
    try {
        std::size_t pos = 0;
        const double v = std::stod(s, &pos);
        if (pos != s.size()) throw std::invalid_argument("trailing characters");
        return v;
    } catch (const std::exception&) {
        throw ParseError("load_csv: line " + std::to_string(line_no) + ", column " + column +
                         ": cannot parse value '" + s + "'");
    }
}

}  // namespace

LabeledDataset load_csv(const std::string& path, const std::string& split_tag) {
    std::ifstream in(path);
    if (!in) throw ParseError("load_csv: cannot open " + path);
    std::string line;
    if (!std::getline(in, line)) throw ParseError("load_csv: " + path + " is empty");
    const auto header = split_line(line);
    std::vector<std::size_t> feature_cols, concept_cols;
    std::vector<std::string> names(header.size());
    long label_col = -1;
    for (std::size_t j = 0; j < header.size(); ++j) {
        const std::string& h = header[j];
        names[j] = h;
        if (h.rfind("feature:", 0) == 0) {
            feature_cols.push_back(j);
        } else if (h.rfind("concept:", 0) == 0) {
            concept_cols.push_back(j);
        } else if (h == "label") {
            if (label_col >= 0) throw ParseError("load_csv: line 1: duplicate label column");
            label_col = static_cast<long>(j);
        } else {
            throw ParseError("load_csv: line 1: column '" + h +
                             "' has no role prefix (feature:/concept:/label)");
        }
    }
    if (feature_cols.empty()) throw ParseError("load_csv: no feature: columns in header");
    if (concept_cols.empty()) throw ParseError("load_csv: no concept: columns in header");
    if (label_col < 0) throw ParseError("load_csv: no label column in header");

    std::vector<double> xs, cs;
    std::vector<int> ys;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto fields = split_line(line);
        if (fields.size() != header.size())
            throw ParseError("load_csv: line " + std::to_string(line_no) + ": expected " +
                             std::to_string(header.size()) + " fields, got " +
                             std::to_string(fields.size()));
        for (std::size_t j : feature_cols) xs.push_back(parse_double(fields[j], line_no, names[j]));
        for (std::size_t j : concept_cols) {
            const double v = parse_double(fields[j], line_no, names[j]);
            if (v != 0.0 && v != 1.0)
                throw ParseError("load_csv: line " + std::to_string(line_no) + ", column " + names[j] +
                                 ": non-binary concept value '" + fields[j] + "'");
            cs.push_back(v);
        }
        const double yv = parse_double(fields[label_col], line_no, "label");
        if (yv < 0.0 || yv != std::floor(yv))
            throw ParseError("load_csv: line " + std::to_string(line_no) + ": unknown label '" +
                             fields[label_col] + "' (must be a non-negative integer)");
        ys.push_back(static_cast<int>(yv));
    }
    if (ys.empty()) throw ParseError("load_csv: " + path + " has no data rows");

    LabeledDataset ds;
    const std::size_t n = ys.size();
    ds.x = Tensor(Shape{n, feature_cols.size()}, std::move(xs));
    ds.c = Tensor(Shape{n, concept_cols.size()}, std::move(cs));
    ds.y = std::move(ys);
    ds.num_classes = static_cast<std::size_t>(*std::max_element(ds.y.begin(), ds.y.end())) + 1;
    ds.split = split_tag;
    ds.provenance.push_back("load_csv(" + path + ")");
    return ds;
}

}  // namespace cbm
