#include "taxcl/data.hpp"

#include <algorithm>
#include <cmath>
#include <charconv>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace taxcl {

std::vector<std::size_t> TaxonomyDataset::indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t k = 0; k < split.size(); ++k)
        if (split[k] == s) out.push_back(k);
    return out;
}

int TaxonomyDataset::num_classes() const {
    return y_gt.empty() ? 0 : *std::max_element(y_gt.begin(), y_gt.end()) + 1;
}

int TaxonomyDataset::num_taxonomies() const {
    return y_tax.empty() ? 0 : *std::max_element(y_tax.begin(), y_tax.end()) + 1;
}

void TaxonomyDataset::validate() const {
    const std::size_t n = size();
    if (y_gt.size() != n || y_tax.size() != n || split.size() != n)
        throw std::invalid_argument("dataset: label/split columns do not match row count");
    for (std::size_t k = 0; k < n; ++k)
        if (y_gt[k] < 0 || y_tax[k] < 0)
            throw std::invalid_argument("dataset: negative label at row " + std::to_string(k));
    if (!x.all_finite()) throw std::invalid_argument("dataset: non-finite feature value");
}

void GenSpec::validate() const {
    if (superclasses < 1 || subclasses < 1 || n_per_class < 1 || dim < 1)
        throw std::invalid_argument("GenSpec: counts must be >= 1");
    if (!(sigma_super >= 0.0 && sigma_sub >= 0.0 && sigma_noise >= 0.0))
        throw std::invalid_argument("GenSpec: dispersions must be >= 0");
    if (!(train_fraction > 0.0 && train_fraction <= 1.0))
        throw std::invalid_argument("GenSpec: train_fraction must lie in (0, 1]");
}

std::vector<std::string> GenSpec::warnings() const {
    std::vector<std::string> w;
    if (!(sigma_super > sigma_sub && sigma_sub > sigma_noise && sigma_noise > 0.0))
        w.emplace_back("dispersions should satisfy sigma_super > sigma_sub > sigma_noise > 0; "
                       "the taxonomy structure collapses otherwise");
    return w;
}

GeneratedData generate_with_centers(const GenSpec& spec) {
    spec.validate();
    const auto S = static_cast<std::size_t>(spec.superclasses);
    const auto C = static_cast<std::size_t>(spec.subclasses);
    const auto n = static_cast<std::size_t>(spec.n_per_class);
    const auto d = static_cast<std::size_t>(spec.dim);

    SeededRng rng(spec.seed, 0);
    GeneratedData out;
    out.superclass_centers = Matrix(S, d);
    for (double& v : out.superclass_centers.data()) v = spec.sigma_super * rng.next_gaussian();
    out.subclass_centers = Matrix(S * C, d);
    for (std::size_t s = 0; s < S; ++s)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t j = 0; j < d; ++j)
                out.subclass_centers(s * C + c, j) =
                    out.superclass_centers(s, j) + spec.sigma_sub * rng.next_gaussian();

    auto& ds = out.dataset;
    ds.x = Matrix(S * C * n, d);
    ds.y_gt.resize(S * C * n);
    ds.y_tax.resize(S * C * n);
    ds.split.assign(S * C * n, Split::test);
    for (std::size_t cls = 0; cls < S * C; ++cls) {
        for (std::size_t k = 0; k < n; ++k) {
            const std::size_t row = cls * n + k;
            for (std::size_t j = 0; j < d; ++j)
                ds.x(row, j) = out.subclass_centers(cls, j) + spec.sigma_noise * rng.next_gaussian();
            ds.y_gt[row] = static_cast<int>(cls);
            ds.y_tax[row] = static_cast<int>(cls / C);
        }
    }

    SeededRng split_rng(spec.seed, 1);
    const auto n_train = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::llround(spec.train_fraction * static_cast<double>(n))), 1, n);
    std::vector<std::size_t> order(n);
    for (std::size_t cls = 0; cls < S * C; ++cls) {
        for (std::size_t k = 0; k < n; ++k) order[k] = k;
        split_rng.shuffle(order);
        for (std::size_t k = 0; k < n_train; ++k) ds.split[cls * n + order[k]] = Split::train;
    }
    return out;
}

TaxonomyDataset generate(const GenSpec& spec) { return generate_with_centers(spec).dataset; }

std::vector<double> augment(std::span<const double> x, const AugmentSpec& spec, SeededRng& rng) {
    if (spec.strength < 0.0) throw std::invalid_argument("augment: strength must be >= 0");
    std::vector<double> out(x.size());
    const double sigma = spec.strength * spec.noise_scale;
    for (std::size_t k = 0; k < x.size(); ++k) {
        const double g = rng.next_gaussian();
        const bool keep = rng.next_uniform() < spec.keep_prob;
        out[k] = keep ? x[k] + sigma * g : 0.0;
    }
    return out;
}

LabeledBatch make_two_view_batch(const TaxonomyDataset& data, std::span<const std::size_t> indices,
                                 const AugmentSpec& spec, SeededRng& rng) {
    const std::size_t b = indices.size();
    LabeledBatch batch;
    batch.embeddings = Matrix(2 * b, data.dim());
    batch.y_gt.resize(2 * b);
    batch.y_tax.resize(2 * b);
    batch.view_pair.resize(2 * b);
    for (std::size_t k = 0; k < b; ++k) {
        const std::size_t src = indices[k];
        for (std::size_t v = 0; v < 2; ++v) {
            const std::size_t row = 2 * k + v;
            const auto aug = augment(data.x.row(src), spec, rng);
            std::copy(aug.begin(), aug.end(), batch.embeddings.row(row).begin());
            batch.y_gt[row] = data.y_gt[src];
            batch.y_tax[row] = data.y_tax[src];
            batch.view_pair[row] = 2 * k + (1 - v);
        }
    }
    return batch;
}

LabeledBatch sample_two_view_batch(const TaxonomyDataset& data, std::size_t batch_size,
                                   const AugmentSpec& spec, SeededRng& rng) {
    const auto train = data.indices(Split::train);
    if (batch_size == 0) throw std::invalid_argument("batch size must be >= 1");
    if (batch_size > train.size())
        throw std::invalid_argument("batch size " + std::to_string(batch_size) +
                                    " exceeds training set size " + std::to_string(train.size()));
    const auto picks = sample_without_replacement(train.size(), batch_size, rng);
    std::vector<std::size_t> chosen(batch_size);
    for (std::size_t k = 0; k < batch_size; ++k) chosen[k] = train[picks[k]];
    return make_two_view_batch(data, chosen, spec, rng);
}

std::string to_string(Split s) { return s == Split::train ? "train" : "test"; }

void write_csv(std::ostream& os, const TaxonomyDataset& data) {
    for (std::size_t j = 0; j < data.dim(); ++j) os << "feat_" << j << ',';
    os << "y_gt,y_tax,split\n";
    for (std::size_t k = 0; k < data.size(); ++k) {
        for (std::size_t j = 0; j < data.dim(); ++j) os << format_double(data.x(k, j)) << ',';
        os << data.y_gt[k] << ',' << data.y_tax[k] << ',' << to_string(data.split[k]) << '\n';
    }
}

namespace {

std::vector<std::string> split_fields(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

std::string trim(std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
}

int parse_label(const std::string& text, std::size_t line_no, const char* column) {
    const std::string t = trim(text);
    int v = 0;
    auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (ec != std::errc{} || ptr != t.data() + t.size() || t.empty() || v < 0)
        throw FormatError("line " + std::to_string(line_no) + ": bad " + column + " value '" +
                          text + "'");
    return v;
}

}  // namespace

TaxonomyDataset read_csv(std::istream& is) {
    std::string line;
    if (!std::getline(is, line)) throw FormatError("empty dataset file (missing header)");
    auto header = split_fields(line);
    for (auto& h : header) h = trim(h);

    std::size_t d = 0;
    while (d < header.size() && header[d] == "feat_" + std::to_string(d)) ++d;
    if (d == 0) throw FormatError("header: expected leading columns feat_0..feat_{d-1}");
    const char* required[] = {"y_gt", "y_tax", "split"};
    for (std::size_t k = 0; k < 3; ++k) {
        if (d + k >= header.size() || header[d + k] != required[k])
            throw FormatError(std::string("header: missing column '") + required[k] + "'");
    }
    if (header.size() != d + 3)
        throw FormatError("header: unexpected column '" + header[d + 3] + "'");

    TaxonomyDataset ds;
    std::vector<double> values;
    std::size_t line_no = 1;
    while (std::getline(is, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        const auto fields = split_fields(line);
        if (fields.size() != d + 3)
            throw FormatError("line " + std::to_string(line_no) + ": expected " +
                              std::to_string(d + 3) + " fields, got " +
                              std::to_string(fields.size()));
        for (std::size_t j = 0; j < d; ++j) {
            try {
                values.push_back(parse_double(fields[j]));
            } catch (const FormatError& e) {
                throw FormatError("line " + std::to_string(line_no) + ": " + e.what());
            }
        }
        ds.y_gt.push_back(parse_label(fields[d], line_no, "y_gt"));
        ds.y_tax.push_back(parse_label(fields[d + 1], line_no, "y_tax"));
        const std::string sp = trim(fields[d + 2]);
        if (sp == "train")
            ds.split.push_back(Split::train);
        else if (sp == "test")
            ds.split.push_back(Split::test);
        else
            throw FormatError("line " + std::to_string(line_no) + ": bad split value '" + sp + "'");
    }
    ds.x = Matrix(ds.y_gt.size(), d, std::move(values));
    ds.validate();
    return ds;
}

void save_csv(const TaxonomyDataset& data, const std::filesystem::path& path) {
    std::ofstream os(path);
    if (!os) throw std::ios_base::failure("cannot open " + path.string() + " for writing");
    write_csv(os, data);
    if (!os) throw std::ios_base::failure("write failed: " + path.string());
}

TaxonomyDataset load_csv(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw std::ios_base::failure("cannot open " + path.string());
    try {
        return read_csv(is);
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

}  // namespace taxcl
