#pragma once

// Small ReLU MLP encoder f(.) with a projection head g(.), exact
// backpropagation through the row normalization, SGD pretraining with any
// contrastive loss variant, and a linear probe on frozen representations.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "taxcl/data.hpp"
#include "taxcl/losses.hpp"
#include "taxcl/numerics.hpp"

namespace taxcl {

struct MlpSpec {
    std::size_t input_dim = 16;
    // Encoder layer output widths; the last entry is the representation width.
    std::vector<std::size_t> encoder_widths{64, 64, 32};
    // Projection layer output widths; the last entry is the embedding width.
    std::vector<std::size_t> projection_widths{32, 16};
    // Weights ~ U(-s, s), s = init_gain * sqrt(6 / (fan_in + fan_out)).
    double init_gain = 1.0;

    std::size_t representation_dim() const { return encoder_widths.back(); }
    std::size_t embedding_dim() const { return projection_widths.back(); }
    void validate() const;

    friend bool operator==(const MlpSpec&, const MlpSpec&) = default;
};

struct DenseLayer {
    Matrix weight;  // out x in
    Matrix bias;    // 1 x out

    friend bool operator==(const DenseLayer&, const DenseLayer&) = default;
};

// Encoder layers are all followed by ReLU (the representation is
// post-activation); the projection head applies ReLU between layers only.
struct MlpWeights {
    std::vector<DenseLayer> encoder;
    std::vector<DenseLayer> projection;

    std::vector<Matrix*> parameters();
    std::vector<const Matrix*> parameters() const;
    std::size_t parameter_count() const;
    MlpWeights zeros_like() const;

    friend bool operator==(const MlpWeights&, const MlpWeights&) = default;
};

MlpWeights init_weights(const MlpSpec& spec, SeededRng& rng);

struct ForwardResult {
    Matrix representations;  // R, encoder output
    Matrix embeddings;       // Z, unit rows (zero for degenerate rows)
    std::vector<bool> degenerate;
    // cached activations for backward
    std::vector<Matrix> encoder_inputs;
    std::vector<Matrix> encoder_pre;
    std::vector<Matrix> projection_inputs;
    std::vector<Matrix> projection_pre;
    Matrix projection_out;  // pre-normalization
};

ForwardResult forward(const MlpSpec& spec, const MlpWeights& weights, const Matrix& x);

// Encoder only.
Matrix encode(const MlpSpec& spec, const MlpWeights& weights, const Matrix& x);

// Weight gradients for upstream dL/dZ and optionally dL/dR (either may be
// empty, meaning zero).
MlpWeights backward(const MlpSpec& spec, const MlpWeights& weights, const ForwardResult& fwd,
                    const Matrix& grad_embeddings, const Matrix& grad_representations = {});

enum class ScheduleKind { cosine_warmup, step_decay, constant };

struct LrSchedule {
    ScheduleKind kind = ScheduleKind::cosine_warmup;
    double base_lr = 0.1;
    std::size_t total_epochs = 100;
    std::size_t warmup_epochs = 5;
    std::vector<std::size_t> milestones;  // step_decay
    double factor = 0.1;                  // step_decay

    // Per-epoch rate. step_decay is right-continuous: lr drops at the
    // milestone epoch itself.
    double at(std::size_t epoch) const;
};

struct TrainConfig {
    std::size_t epochs = 100;
    std::size_t batch_size = 64;  // samples per batch; each gives two views
    double lr = 0.1;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    ScheduleKind schedule = ScheduleKind::cosine_warmup;
    std::size_t warmup_epochs = 5;
    std::vector<std::size_t> milestones;
    double decay_factor = 0.1;
    LossConfig loss;
    AugmentSpec augment;
    std::uint64_t seed = 0;

    LrSchedule lr_schedule() const;
    void validate() const;
};

struct Checkpoint {
    MlpSpec spec;
    MlpWeights weights;
    std::uint64_t step = 0;
    std::string config_json = "{}";  // snapshot of the run configuration
    SeededRng::State rng_state;

    friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

// "TXCK", u32 version, u32 JSON length, JSON header, u32 matrix count, then
// each weight/bias matrix in the TXCL binary format.
void write_checkpoint(std::ostream& os, const Checkpoint& ckpt);
Checkpoint read_checkpoint(std::istream& is);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

struct TraceRow {
    std::size_t epoch = 0;
    std::size_t step = 0;
    double lr = 0.0;
    double loss = 0.0;
};

struct PretrainResult {
    Checkpoint checkpoint;
    std::vector<TraceRow> trace;       // one row per optimizer step
    std::vector<double> epoch_losses;  // mean batch loss per epoch
};

class TrainingDiverged : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Weight init draws from stream 1 of the seed, batch sampling and
// augmentation from stream 2.
MlpWeights initial_weights(const MlpSpec& spec, std::uint64_t seed);

PretrainResult pretrain(const TaxonomyDataset& data, const MlpSpec& spec, const TrainConfig& cfg);

// CSV: epoch,step,lr,loss
void write_trace_csv(std::ostream& os, const std::vector<TraceRow>& trace);

struct ProbeConfig {
    std::size_t epochs = 100;
    std::size_t batch_size = 64;
    double lr = 0.1;
    double momentum = 0.9;
    double weight_decay = 0.0;
    std::vector<std::size_t> milestones{60, 80};
    double decay_factor = 0.1;
    // z-score features with training-split statistics before the linear layer
    bool standardize = true;
    std::uint64_t seed = 0;
};

struct ProbeResult {
    double train_accuracy = 0.0;
    double test_accuracy = 0.0;
    std::size_t num_classes = 0;
    DenseLayer head;
};

// Softmax regression trained with SGD on fixed features.
ProbeResult train_linear_probe(const Matrix& train_features, const std::vector<int>& train_labels,
                               const Matrix& test_features, const std::vector<int>& test_labels,
                               std::size_t num_classes, const ProbeConfig& cfg);

// Frozen encoder; the head sees representations R of the train split and is
// scored on the test split.
ProbeResult linear_probe(const Checkpoint& ckpt, const TaxonomyDataset& data,
                         const ProbeConfig& cfg);

std::string to_string(ScheduleKind k);
ScheduleKind parse_schedule_kind(std::string_view s);

// JSON snapshots used in checkpoints and run records.
std::string to_json(const MlpSpec& spec);
std::string to_json(const TrainConfig& cfg);
std::string to_json(const ProbeConfig& cfg);

}  // namespace taxcl
