#include "taxcl/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <limits>
#include <numbers>
#include <ostream>
#include <stdexcept>
#include <tuple>

#include <json.hpp>

namespace taxcl {

using nlohmann::json;

void MlpSpec::validate() const {
    if (input_dim < 1) throw std::invalid_argument("MlpSpec: input_dim must be >= 1");
    if (encoder_widths.empty() || projection_widths.empty())
        throw std::invalid_argument("MlpSpec: encoder and projection need at least one layer");
    for (auto w : encoder_widths)
        if (w < 1) throw std::invalid_argument("MlpSpec: widths must be >= 1");
    for (auto w : projection_widths)
        if (w < 1) throw std::invalid_argument("MlpSpec: widths must be >= 1");
    if (embedding_dim() < 2) throw std::invalid_argument("MlpSpec: embedding width must be >= 2");
}

std::vector<Matrix*> MlpWeights::parameters() {
    std::vector<Matrix*> out;
    for (auto* group : {&encoder, &projection})
        for (auto& l : *group) {
            out.push_back(&l.weight);
            out.push_back(&l.bias);
        }
    return out;
}

std::vector<const Matrix*> MlpWeights::parameters() const {
    std::vector<const Matrix*> out;
    for (const auto* group : {&encoder, &projection})
        for (const auto& l : *group) {
            out.push_back(&l.weight);
            out.push_back(&l.bias);
        }
    return out;
}

std::size_t MlpWeights::parameter_count() const {
    std::size_t n = 0;
    for (const Matrix* p : parameters()) n += p->size();
    return n;
}

MlpWeights MlpWeights::zeros_like() const {
    MlpWeights z = *this;
    for (Matrix* p : z.parameters()) std::fill(p->data().begin(), p->data().end(), 0.0);
    return z;
}

namespace {

DenseLayer make_layer(std::size_t in, std::size_t out, double gain, SeededRng& rng) {
    DenseLayer l{Matrix(out, in), Matrix(1, out)};
    const double s = gain * std::sqrt(6.0 / static_cast<double>(in + out));
    for (double& w : l.weight.data()) w = s * (2.0 * rng.next_uniform() - 1.0);
    return l;
}

// y = x W^T + b
Matrix dense_forward(const DenseLayer& l, const Matrix& x) {
    Matrix y = matmul_bt(x, l.weight);
    for (std::size_t i = 0; i < y.rows(); ++i)
        for (std::size_t j = 0; j < y.cols(); ++j) y(i, j) += l.bias(0, j);
    return y;
}

Matrix relu(Matrix m) {
    for (double& v : m.data()) v = v > 0.0 ? v : 0.0;
    return m;
}

// Accumulates weight/bias gradients for `delta` and returns dL/d(input).
Matrix dense_backward(const DenseLayer& l, const Matrix& input, const Matrix& delta,
                      DenseLayer& grad) {
    grad.weight = matmul_at(delta, input);
    grad.bias = Matrix(1, delta.cols());
    for (std::size_t i = 0; i < delta.rows(); ++i)
        for (std::size_t j = 0; j < delta.cols(); ++j) grad.bias(0, j) += delta(i, j);
    return matmul(delta, l.weight);
}

void mask_relu(Matrix& delta, const Matrix& pre) {
    auto& d = delta.data();
    const auto& p = pre.data();
    for (std::size_t k = 0; k < d.size(); ++k)
        if (!(p[k] > 0.0)) d[k] = 0.0;
}

void check_input(const MlpSpec& spec, const MlpWeights& w, const Matrix& x) {
    if (x.cols() != spec.input_dim)
        throw std::invalid_argument("forward: input has " + std::to_string(x.cols()) +
                                    " columns, model expects " + std::to_string(spec.input_dim));
    if (w.encoder.size() != spec.encoder_widths.size() ||
        w.projection.size() != spec.projection_widths.size())
        throw std::invalid_argument("forward: weights do not match the model spec");
}

}  // namespace

MlpWeights init_weights(const MlpSpec& spec, SeededRng& rng) {
    spec.validate();
    MlpWeights w;
    std::size_t in = spec.input_dim;
    for (auto out : spec.encoder_widths) {
        w.encoder.push_back(make_layer(in, out, spec.init_gain, rng));
        in = out;
    }
    for (auto out : spec.projection_widths) {
        w.projection.push_back(make_layer(in, out, spec.init_gain, rng));
        in = out;
    }
    return w;
}

MlpWeights initial_weights(const MlpSpec& spec, std::uint64_t seed) {
    SeededRng rng(seed, 1);
    return init_weights(spec, rng);
}

ForwardResult forward(const MlpSpec& spec, const MlpWeights& weights, const Matrix& x) {
    check_input(spec, weights, x);
    ForwardResult f;
    Matrix h = x;
    for (const auto& layer : weights.encoder) {
        f.encoder_inputs.push_back(h);
        Matrix pre = dense_forward(layer, h);
        h = relu(pre);
        f.encoder_pre.push_back(std::move(pre));
    }
    f.representations = h;
    for (std::size_t k = 0; k < weights.projection.size(); ++k) {
        f.projection_inputs.push_back(h);
        Matrix pre = dense_forward(weights.projection[k], h);
        h = k + 1 < weights.projection.size() ? relu(pre) : pre;
        f.projection_pre.push_back(std::move(pre));
    }
    f.projection_out = h;
    auto normalized = l2_normalize_rows(h);
    f.embeddings = std::move(normalized.rows);
    f.degenerate = std::move(normalized.degenerate);
    return f;
}

Matrix encode(const MlpSpec& spec, const MlpWeights& weights, const Matrix& x) {
    check_input(spec, weights, x);
    Matrix h = x;
    for (const auto& layer : weights.encoder) h = relu(dense_forward(layer, h));
    return h;
}

MlpWeights backward(const MlpSpec& spec, const MlpWeights& weights, const ForwardResult& fwd,
                    const Matrix& grad_embeddings, const Matrix& grad_representations) {
    (void)spec;
    const std::size_t m = fwd.embeddings.rows();
    MlpWeights grads = weights.zeros_like();

    // z = v / |v|  =>  dL/dv = (g - z (z . g)) / |v|
    Matrix delta(m, fwd.projection_out.cols());
    if (!grad_embeddings.empty()) {
        for (std::size_t i = 0; i < m; ++i) {
            if (fwd.degenerate[i]) continue;
            const auto z = fwd.embeddings.row(i);
            const auto g = grad_embeddings.row(i);
            const auto v = fwd.projection_out.row(i);
            const double norm = std::sqrt(dot(v, v));
            const double zg = dot(z, g);
            for (std::size_t k = 0; k < z.size(); ++k) delta(i, k) = (g[k] - z[k] * zg) / norm;
        }
    }

    for (std::size_t k = weights.projection.size(); k-- > 0;) {
        if (k + 1 < weights.projection.size()) mask_relu(delta, fwd.projection_pre[k]);
        delta = dense_backward(weights.projection[k], fwd.projection_inputs[k], delta,
                               grads.projection[k]);
    }

    if (!grad_representations.empty()) {
        auto& d = delta.data();
        const auto& g = grad_representations.data();
        for (std::size_t k = 0; k < d.size(); ++k) d[k] += g[k];
    }

    for (std::size_t k = weights.encoder.size(); k-- > 0;) {
        mask_relu(delta, fwd.encoder_pre[k]);
        delta = dense_backward(weights.encoder[k], fwd.encoder_inputs[k], delta, grads.encoder[k]);
    }
    return grads;
}

// --- schedule / config -----------------------------------------------------

double LrSchedule::at(std::size_t epoch) const {
    switch (kind) {
        case ScheduleKind::constant: return base_lr;
        case ScheduleKind::step_decay: {
            double lr = base_lr;
            for (auto m : milestones)
                if (epoch >= m) lr *= factor;
            return lr;
        }
        case ScheduleKind::cosine_warmup: {
            if (epoch < warmup_epochs)
                return base_lr * static_cast<double>(epoch + 1) / static_cast<double>(warmup_epochs);
            const std::size_t span = total_epochs > warmup_epochs ? total_epochs - warmup_epochs : 1;
            const double progress =
                static_cast<double>(epoch - warmup_epochs) / static_cast<double>(span);
            return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * std::min(progress, 1.0)));
        }
    }
    return base_lr;
}

LrSchedule TrainConfig::lr_schedule() const {
    LrSchedule s;
    s.kind = schedule;
    s.base_lr = lr;
    s.total_epochs = epochs;
    s.warmup_epochs = warmup_epochs;
    s.milestones = milestones;
    s.factor = decay_factor;
    return s;
}

void TrainConfig::validate() const {
    if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw std::invalid_argument("lr must be >= 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("momentum must lie in [0, 1)");
    if (!(weight_decay >= 0.0)) throw std::invalid_argument("weight decay must be >= 0");
    loss.validate();
}

std::string to_string(ScheduleKind k) {
    switch (k) {
        case ScheduleKind::cosine_warmup: return "cosine-warmup";
        case ScheduleKind::step_decay: return "step-decay";
        case ScheduleKind::constant: return "constant";
    }
    return "?";
}

ScheduleKind parse_schedule_kind(std::string_view s) {
    if (s == "cosine-warmup" || s == "cosine_warmup" || s == "cosine") return ScheduleKind::cosine_warmup;
    if (s == "step-decay" || s == "step_decay" || s == "step") return ScheduleKind::step_decay;
    if (s == "constant") return ScheduleKind::constant;
    throw std::invalid_argument("unknown schedule '" + std::string(s) + "'");
}

namespace {

json spec_json(const MlpSpec& s) {
    return {{"input_dim", s.input_dim},
            {"encoder_widths", s.encoder_widths},
            {"projection_widths", s.projection_widths},
            {"init_gain", s.init_gain}};
}

MlpSpec spec_from_json(const json& j) {
    MlpSpec s;
    s.input_dim = j.at("input_dim").get<std::size_t>();
    s.encoder_widths = j.at("encoder_widths").get<std::vector<std::size_t>>();
    s.projection_widths = j.at("projection_widths").get<std::vector<std::size_t>>();
    s.init_gain = j.at("init_gain").get<double>();
    return s;
}

json loss_json(const LossConfig& c) {
    return {{"variant", to_string(c.variant)},       {"tau", c.tau},
            {"tau_plus", c.tau_plus},                {"alpha", c.alpha},
            {"epsilon", c.epsilon},                  {"q_mode", to_string(c.q_mode)},
            {"reduction", to_string(c.reduction)},   {"debias_sign", to_string(c.debias_sign)},
            {"positive_scale", to_string(c.positive_scale)},
            {"normalization", to_string(c.normalization)}};
}

json train_json(const TrainConfig& c) {
    return {{"epochs", c.epochs},
            {"batch_size", c.batch_size},
            {"lr", c.lr},
            {"momentum", c.momentum},
            {"weight_decay", c.weight_decay},
            {"schedule", to_string(c.schedule)},
            {"warmup_epochs", c.warmup_epochs},
            {"milestones", c.milestones},
            {"decay_factor", c.decay_factor},
            {"loss", loss_json(c.loss)},
            {"augment",
             {{"strength", c.augment.strength},
              {"noise_scale", c.augment.noise_scale},
              {"keep_prob", c.augment.keep_prob}}},
            {"seed", c.seed}};
}

}  // namespace

std::string to_json(const MlpSpec& spec) { return spec_json(spec).dump(); }
std::string to_json(const TrainConfig& cfg) { return train_json(cfg).dump(); }
std::string to_json(const ProbeConfig& c) {
    return json{{"epochs", c.epochs},
                {"batch_size", c.batch_size},
                {"lr", c.lr},
                {"momentum", c.momentum},
                {"weight_decay", c.weight_decay},
                {"milestones", c.milestones},
                {"decay_factor", c.decay_factor},
                {"standardize", c.standardize},
                {"seed", c.seed}}
        .dump();
}

// --- checkpoint ------------------------------------------------------------

namespace {

constexpr char kCheckpointMagic[4] = {'T', 'X', 'C', 'K'};
constexpr std::uint32_t kCheckpointVersion = 1;

void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int k = 0; k < 4; ++k) b[k] = static_cast<unsigned char>(v >> (8 * k));
    os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) throw FormatError("truncated checkpoint");
    std::uint32_t v = 0;
    for (int k = 0; k < 4; ++k) v |= static_cast<std::uint32_t>(b[k]) << (8 * k);
    return v;
}

}  // namespace

void write_checkpoint(std::ostream& os, const Checkpoint& ckpt) {
    json rng = {{"s", ckpt.rng_state.s},
                {"seed", ckpt.rng_state.seed},
                {"stream", ckpt.rng_state.stream},
                {"has_spare", ckpt.rng_state.has_spare},
                {"spare_bits", std::bit_cast<std::uint64_t>(ckpt.rng_state.spare)}};
    json header = {{"spec", spec_json(ckpt.spec)},
                   {"step", ckpt.step},
                   {"rng", rng},
                   {"config", json::parse(ckpt.config_json)}};
    const std::string text = header.dump();
    os.write(kCheckpointMagic, 4);
    put_u32(os, kCheckpointVersion);
    put_u32(os, static_cast<std::uint32_t>(text.size()));
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    const auto params = ckpt.weights.parameters();
    put_u32(os, static_cast<std::uint32_t>(params.size()));
    for (const Matrix* p : params) write_matrix_binary(os, *p);
}

Checkpoint read_checkpoint(std::istream& is) {
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0)
        throw FormatError("not a checkpoint (expected TXCK magic)");
    const auto version = get_u32(is);
    if (version != kCheckpointVersion)
        throw FormatError("unsupported checkpoint version " + std::to_string(version));
    const auto len = get_u32(is);
    std::string text(len, '\0');
    if (!is.read(text.data(), len)) throw FormatError("truncated checkpoint header");

    Checkpoint ckpt;
    try {
        const json header = json::parse(text);
        ckpt.spec = spec_from_json(header.at("spec"));
        ckpt.step = header.at("step").get<std::uint64_t>();
        const auto& rng = header.at("rng");
        ckpt.rng_state.s = rng.at("s").get<std::array<std::uint64_t, 4>>();
        ckpt.rng_state.seed = rng.at("seed").get<std::uint64_t>();
        ckpt.rng_state.stream = rng.at("stream").get<std::uint64_t>();
        ckpt.rng_state.has_spare = rng.at("has_spare").get<bool>();
        ckpt.rng_state.spare = std::bit_cast<double>(rng.at("spare_bits").get<std::uint64_t>());
        ckpt.config_json = header.at("config").dump();
    } catch (const json::exception& e) {
        throw FormatError(std::string("bad checkpoint header: ") + e.what());
    }

    SeededRng dummy;
    ckpt.weights = init_weights(ckpt.spec, dummy);
    const auto count = get_u32(is);
    auto params = ckpt.weights.parameters();
    if (count != params.size()) throw FormatError("checkpoint matrix count does not match spec");
    for (Matrix* p : params) {
        Matrix m = read_matrix_binary(is);
        if (m.rows() != p->rows() || m.cols() != p->cols())
            throw FormatError("checkpoint matrix shape does not match spec");
        *p = std::move(m);
    }
    return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::ios_base::failure("cannot open " + path.string() + " for writing");
    write_checkpoint(os, ckpt);
    if (!os) throw std::ios_base::failure("write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::ios_base::failure("cannot open " + path.string());
    return read_checkpoint(is);
}

// --- pretraining -----------------------------------------------------------

namespace {

struct Sgd {
    double momentum;
    double weight_decay;
    MlpWeights velocity;

    // v = mu v + g + wd w (weights only); w -= lr v
    void step(MlpWeights& weights, const MlpWeights& grads, double lr) {
        auto w = weights.parameters();
        auto g = grads.parameters();
        auto v = velocity.parameters();
        for (std::size_t k = 0; k < w.size(); ++k) {
            const bool is_weight = k % 2 == 0;
            auto& wd = w[k]->data();
            const auto& gd = g[k]->data();
            auto& vd = v[k]->data();
            for (std::size_t e = 0; e < wd.size(); ++e) {
                double grad = gd[e];
                if (is_weight) grad += weight_decay * wd[e];
                vd[e] = momentum * vd[e] + grad;
                wd[e] -= lr * vd[e];
            }
        }
    }
};

bool all_finite(const MlpWeights& w) {
    for (const Matrix* p : w.parameters())
        if (!p->all_finite()) return false;
    return true;
}

}  // namespace

PretrainResult pretrain(const TaxonomyDataset& data, const MlpSpec& spec, const TrainConfig& cfg) {
    spec.validate();
    cfg.validate();
    data.validate();
    if (spec.input_dim != data.dim())
        throw std::invalid_argument("model input width " + std::to_string(spec.input_dim) +
                                    " does not match dataset dimension " +
                                    std::to_string(data.dim()));
    auto train = data.indices(Split::train);
    if (train.empty()) throw std::invalid_argument("dataset has no training rows");
    if (cfg.batch_size > train.size())
        throw std::invalid_argument("batch size " + std::to_string(cfg.batch_size) +
                                    " exceeds training set size " + std::to_string(train.size()));

    PretrainResult out;
    out.checkpoint.spec = spec;
    out.checkpoint.weights = initial_weights(spec, cfg.seed);
    auto& weights = out.checkpoint.weights;
    Sgd opt{cfg.momentum, cfg.weight_decay, weights.zeros_like()};
    SeededRng rng(cfg.seed, 2);
    const LrSchedule schedule = cfg.lr_schedule();
    const std::size_t steps_per_epoch = train.size() / cfg.batch_size;

    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = schedule.at(epoch);
        rng.shuffle(train);
        double epoch_total = 0.0;
        for (std::size_t s = 0; s < steps_per_epoch; ++s) {
            const std::span<const std::size_t> idx(train.data() + s * cfg.batch_size,
                                                   cfg.batch_size);
            LabeledBatch batch = make_two_view_batch(data, idx, cfg.augment, rng);
            const ForwardResult fwd = forward(spec, weights, batch.embeddings);
            if (!fwd.embeddings.all_finite())
                throw TrainingDiverged("non-finite embeddings at epoch " + std::to_string(epoch) +
                                       ", step " + std::to_string(step));
            batch.embeddings = fwd.embeddings;
            const LossResult loss = compute_loss(batch, cfg.loss);
            if (!std::isfinite(loss.value))
                throw TrainingDiverged("non-finite loss at epoch " + std::to_string(epoch) +
                                       ", step " + std::to_string(step));
            const MlpWeights grads = backward(spec, weights, fwd, loss.grad);
            if (!all_finite(grads))
                throw TrainingDiverged("non-finite gradient at epoch " + std::to_string(epoch) +
                                       ", step " + std::to_string(step));
            opt.step(weights, grads, lr);
            out.trace.push_back({epoch, step, lr, loss.value});
            epoch_total += loss.value;
            ++step;
        }
        out.epoch_losses.push_back(epoch_total / static_cast<double>(steps_per_epoch));
    }
    if (!all_finite(weights)) throw TrainingDiverged("weights became non-finite");

    out.checkpoint.step = step;
    out.checkpoint.rng_state = rng.state();
    json snapshot = json::parse(to_json(cfg));
    snapshot["mlp"] = spec_json(spec);
    out.checkpoint.config_json = snapshot.dump();
    return out;
}

void write_trace_csv(std::ostream& os, const std::vector<TraceRow>& trace) {
    os << "epoch,step,lr,loss\n";
    for (const auto& r : trace)
        os << r.epoch << ',' << r.step << ',' << format_double(r.lr) << ',' << format_double(r.loss)
           << '\n';
}

// --- linear probe ----------------------------------------------------------

namespace {

std::size_t argmax_row(const Matrix& logits, std::size_t i) {
    const auto r = logits.row(i);
    return static_cast<std::size_t>(std::max_element(r.begin(), r.end()) - r.begin());
}

double accuracy(const DenseLayer& head, const Matrix& x, const std::vector<int>& y) {
    if (x.rows() == 0) return std::numeric_limits<double>::quiet_NaN();
    const Matrix logits = dense_forward(head, x);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < x.rows(); ++i)
        if (argmax_row(logits, i) == static_cast<std::size_t>(y[i])) ++hits;
    return static_cast<double>(hits) / static_cast<double>(x.rows());
}

}  // namespace

ProbeResult train_linear_probe(const Matrix& train_features, const std::vector<int>& train_labels,
                               const Matrix& test_features, const std::vector<int>& test_labels,
                               std::size_t num_classes, const ProbeConfig& cfg) {
    if (train_features.rows() != train_labels.size() || test_features.rows() != test_labels.size())
        throw std::invalid_argument("probe: feature/label count mismatch");
    if (train_features.rows() == 0) throw std::invalid_argument("probe: no training rows");
    if (cfg.batch_size < 1) throw std::invalid_argument("probe: batch size must be >= 1");
    {
        std::vector<int> seen(train_labels);
        std::sort(seen.begin(), seen.end());
        seen.erase(std::unique(seen.begin(), seen.end()), seen.end());
        if (seen.size() < 2 || num_classes < 2)
            throw std::invalid_argument("probe: need at least two classes in the training split");
        for (int y : train_labels)
            if (y < 0 || static_cast<std::size_t>(y) >= num_classes)
                throw std::invalid_argument("probe: label out of range");
    }

    const std::size_t d = train_features.cols();
    Matrix xtr = train_features;
    Matrix xte = test_features;
    if (cfg.standardize) {
        std::vector<double> mean(d, 0.0), sd(d, 0.0);
        const double n = static_cast<double>(xtr.rows());
        for (std::size_t i = 0; i < xtr.rows(); ++i)
            for (std::size_t j = 0; j < d; ++j) mean[j] += xtr(i, j);
        for (double& m : mean) m /= n;
        for (std::size_t i = 0; i < xtr.rows(); ++i)
            for (std::size_t j = 0; j < d; ++j) sd[j] += (xtr(i, j) - mean[j]) * (xtr(i, j) - mean[j]);
        for (double& s : sd) s = std::sqrt(s / n);
        for (double& s : sd)
            if (s < 1e-12) s = 1.0;
        for (Matrix* x : {&xtr, &xte})
            for (std::size_t i = 0; i < x->rows(); ++i)
                for (std::size_t j = 0; j < d; ++j) (*x)(i, j) = ((*x)(i, j) - mean[j]) / sd[j];
    }

    SeededRng init_rng(cfg.seed, 3);
    ProbeResult res;
    res.num_classes = num_classes;
    res.head = make_layer(d, num_classes, 1.0, init_rng);
    DenseLayer velocity{Matrix(num_classes, d), Matrix(1, num_classes)};

    LrSchedule schedule;
    schedule.kind = ScheduleKind::step_decay;
    schedule.base_lr = cfg.lr;
    schedule.milestones = cfg.milestones;
    schedule.factor = cfg.decay_factor;

    SeededRng rng(cfg.seed, 4);
    std::vector<std::size_t> order(xtr.rows());
    for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
    std::vector<double> prob(num_classes);

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = schedule.at(epoch);
        rng.shuffle(order);
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            const double inv_b = 1.0 / static_cast<double>(end - start);
            DenseLayer grad{Matrix(num_classes, d), Matrix(1, num_classes)};
            for (std::size_t k = start; k < end; ++k) {
                const auto x = xtr.row(order[k]);
                double mx = -std::numeric_limits<double>::infinity();
                for (std::size_t c = 0; c < num_classes; ++c) {
                    prob[c] = dot(res.head.weight.row(c), x) + res.head.bias(0, c);
                    mx = std::max(mx, prob[c]);
                }
                double z = 0.0;
                for (double& p : prob) z += (p = std::exp(p - mx));
                for (std::size_t c = 0; c < num_classes; ++c) {
                    const double e = (prob[c] / z - (static_cast<int>(c) == train_labels[order[k]] ? 1.0 : 0.0)) * inv_b;
                    grad.bias(0, c) += e;
                    auto gw = grad.weight.row(c);
                    for (std::size_t j = 0; j < d; ++j) gw[j] += e * x[j];
                }
            }
            for (auto [w, g, v] : {std::tuple{&res.head.weight, &grad.weight, &velocity.weight},
                                   std::tuple{&res.head.bias, &grad.bias, &velocity.bias}}) {
                const bool decay = w == &res.head.weight;
                for (std::size_t e = 0; e < w->size(); ++e) {
                    double gr = g->data()[e];
                    if (decay) gr += cfg.weight_decay * w->data()[e];
                    v->data()[e] = cfg.momentum * v->data()[e] + gr;
                    w->data()[e] -= lr * v->data()[e];
                }
            }
        }
    }
    res.train_accuracy = accuracy(res.head, xtr, train_labels);
    res.test_accuracy = accuracy(res.head, xte, test_labels);
    return res;
}

ProbeResult linear_probe(const Checkpoint& ckpt, const TaxonomyDataset& data,
                         const ProbeConfig& cfg) {
    data.validate();
    if (ckpt.spec.input_dim != data.dim())
        throw std::invalid_argument("checkpoint expects " + std::to_string(ckpt.spec.input_dim) +
                                    " input features, dataset has " + std::to_string(data.dim()));
    const auto train = data.indices(Split::train);
    const auto test = data.indices(Split::test);
    if (test.empty()) throw std::invalid_argument("probe: dataset has no test rows");
    const Matrix r_train = encode(ckpt.spec, ckpt.weights, data.x.select_rows(train));
    const Matrix r_test = encode(ckpt.spec, ckpt.weights, data.x.select_rows(test));
    std::vector<int> y_train, y_test;
    for (auto k : train) y_train.push_back(data.y_gt[k]);
    for (auto k : test) y_test.push_back(data.y_gt[k]);
    return train_linear_probe(r_train, y_train, r_test, y_test,
                              static_cast<std::size_t>(data.num_classes()), cfg);
}

}  // namespace taxcl
