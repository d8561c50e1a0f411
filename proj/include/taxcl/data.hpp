#pragma once

// Two-level (superclass / subclass) labelled feature datasets: a Gaussian
// hierarchy generator, CSV storage, feature-space augmentation and two-view
// batch sampling.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "taxcl/batchdecomp.hpp"
#include "taxcl/numerics.hpp"

namespace taxcl {

enum class Split : unsigned char { train, test };

struct TaxonomyDataset {
    Matrix x;
    std::vector<int> y_gt;
    std::vector<int> y_tax;
    std::vector<Split> split;

    std::size_t size() const noexcept { return x.rows(); }
    std::size_t dim() const noexcept { return x.cols(); }
    std::vector<std::size_t> indices(Split s) const;
    int num_classes() const;
    int num_taxonomies() const;
    void validate() const;

    friend bool operator==(const TaxonomyDataset&, const TaxonomyDataset&) = default;
};

struct GenSpec {
    int superclasses = 4;  // S
    int subclasses = 5;    // C, per superclass
    int n_per_class = 50;
    int dim = 16;
    double sigma_super = 5.0;
    double sigma_sub = 1.0;
    double sigma_noise = 0.2;
    double train_fraction = 0.8;
    std::uint64_t seed = 0;

    void validate() const;
    // Non-fatal problems, e.g. dispersions out of order.
    std::vector<std::string> warnings() const;
};

struct GeneratedData {
    TaxonomyDataset dataset;
    Matrix superclass_centers;  // S x d
    Matrix subclass_centers;    // S*C x d, row s*C + c
};

// Superclass centers ~ N(0, sigma_super^2 I), subclass centers around them with
// sigma_sub, samples around subclass centers with sigma_noise. Rows are
// class-major; y_tax = y_gt / C. Each class is split train/test separately.
GeneratedData generate_with_centers(const GenSpec& spec);
TaxonomyDataset generate(const GenSpec& spec);

struct AugmentSpec {
    double strength = 1.0;
    double noise_scale = 0.2;  // sigma_noise of the source data
    double keep_prob = 0.9;
};

// x' = m * (x + strength * noise_scale * g), g ~ N(0, I), m_k ~ Bernoulli(keep_prob).
std::vector<double> augment(std::span<const double> x, const AugmentSpec& spec, SeededRng& rng);

// Two augmented views per listed sample; rows 2k and 2k+1 are the views of
// indices[k] and are each other's view pair. `embeddings` holds the
// augmented features.
LabeledBatch make_two_view_batch(const TaxonomyDataset& data, std::span<const std::size_t> indices,
                                 const AugmentSpec& spec, SeededRng& rng);

// B distinct training samples drawn without replacement.
LabeledBatch sample_two_view_batch(const TaxonomyDataset& data, std::size_t batch_size,
                                   const AugmentSpec& spec, SeededRng& rng);

// Header: feat_0..feat_{d-1},y_gt,y_tax,split
void save_csv(const TaxonomyDataset& data, const std::filesystem::path& path);
TaxonomyDataset load_csv(const std::filesystem::path& path);
void write_csv(std::ostream& os, const TaxonomyDataset& data);
TaxonomyDataset read_csv(std::istream& is);

std::string to_string(Split s);

}  // namespace taxcl
