#ifndef GIMVI_NN_CORE_HPP
#define GIMVI_NN_CORE_HPP

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"

#include "gimvi/random.hpp"

/**
 * @file nn_core.hpp
 * @brief Dense networks with exact reverse-mode gradients, reparameterized Gaussian sampling,
 * gradient reversal and Adam.
 *
 * Activations are batched row-wise: a `Matrix` with one row per sample and one column per unit.
 */

namespace gimvi {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

enum class Activation { relu, softplus, identity, softmax, sigmoid };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& name);

struct DenseLayer {
    Matrix weight; ///< out x in
    Vector bias;   ///< out
    Activation activation = Activation::identity;
};

/**
 * Intermediates of one forward pass, enough to run the matching backward pass exactly once.
 */
struct Tape {
    std::vector<Matrix> inputs;
    std::vector<Matrix> pre_activations;
    std::vector<Matrix> outputs;
    const void* owner = nullptr;
    bool consumed = false;

    bool recorded() const { return owner != nullptr; }
};

/** Gradient buffers shaped like the layers of one network. */
struct NetGradient {
    std::vector<Matrix> d_weight;
    std::vector<Vector> d_bias;

    void set_zero();
};

/** A mutable parameter block paired with its gradient, the unit Adam works on. */
struct ParamView {
    std::span<double> value;
    std::span<const double> grad;
};

class DenseNet {
public:
    DenseNet() = default;

    /** Validates that widths chain, softmax is only used last and all parameters are finite. */
    explicit DenseNet(std::vector<DenseLayer> layers);

    /**
     * Multi-layer perceptron with `widths.front()` inputs and `widths.back()` outputs.
     * Weights are drawn from U(-a, a) with a = sqrt(6 / (fan_in + fan_out)); biases start at 0.
     */
    static DenseNet mlp(std::span<const int> widths, Activation hidden, Activation output, Rng& rng);

    int input_width() const;
    int output_width() const;
    std::size_t num_layers() const { return layers_.size(); }
    std::size_t num_parameters() const;

    const std::vector<DenseLayer>& layers() const { return layers_; }
    DenseLayer& layer(std::size_t i) { return layers_.at(i); }

    /** Forward pass over a batch; records intermediates into `tape` when provided. */
    Matrix forward(const Matrix& input, Tape* tape = nullptr) const;

    /**
     * Accumulates parameter gradients of a scalar loss into `grad`, given the loss gradient with respect
     * to this network's output, and returns the gradient with respect to the input.
     */
    Matrix backward(Tape& tape, const Matrix& upstream, NetGradient& grad) const;

    NetGradient zero_gradient() const;

    /** Parameter blocks in a fixed order: weight then bias for every layer. */
    std::vector<ParamView> parameters(NetGradient& grad);

private:
    void validate() const;

    std::vector<DenseLayer> layers_;
};

/**
 * Source of standard-normal noise for reparameterization. A live source draws from an RNG and can
 * record what it drew; a replay source hands back a recorded stream so that a stochastic objective
 * becomes a deterministic function of the parameters.
 */
class NoiseSource {
public:
    explicit NoiseSource(Rng& rng, bool record = false) : rng_(&rng), recording_(record) {}

    static NoiseSource replay(std::vector<double> stream);

    double standard_normal();
    Matrix standard_normal(Eigen::Index rows, Eigen::Index cols);

    const std::vector<double>& recorded() const { return stream_; }

private:
    NoiseSource() = default;

    Rng* rng_ = nullptr;
    bool recording_ = false;
    std::vector<double> stream_;
    std::size_t cursor_ = 0;
    std::normal_distribution<double> normal_;
};

/** A reparameterized draw `mu + exp(log_var / 2) * eps` together with its noise. */
struct GaussianSample {
    Matrix sample;
    Matrix eps;
    Matrix std_dev;
};

GaussianSample reparam_gaussian(const Matrix& mu, const Matrix& log_var, NoiseSource& noise);

/** Gradients of a loss with respect to `mu` and `log_var`, given its gradient with respect to the sample. */
struct GaussianSampleGrad {
    Matrix d_mu;
    Matrix d_log_var;
};

GaussianSampleGrad reparam_backward(const GaussianSample& draw, const Matrix& upstream);

/** Identity on the way forward, multiplies the incoming gradient by `-scale` on the way back. */
struct GradReverse {
    double scale = 1.0;

    explicit GradReverse(double s);

    const Matrix& forward(const Matrix& input) const { return input; }
    Matrix backward(const Matrix& upstream) const;
};

struct AdamState {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::uint64_t step_count = 0;
    std::vector<std::vector<double>> first_moment;
    std::vector<std::vector<double>> second_moment;
};

/** One bias-corrected Adam update over every block; moment buffers are sized on the first call. */
void adam_step(std::span<const ParamView> params, AdamState& state);

/**
 * Parameter serialization.
 *
 * A parameter file is an 8-byte magic `GIMVIPB1`, a little-endian uint64 header length, a UTF-8 JSON
 * header, then a flat blob of little-endian IEEE-754 doubles. Networks are described in the header by
 * `{"offset", "layers": [{"in", "out", "activation"}]}` where `offset` indexes the blob in doubles;
 * each layer stores its weight row-major followed by its bias.
 */
nlohmann::json append_net(const DenseNet& net, std::vector<double>& blob);
DenseNet read_net(const nlohmann::json& description, std::span<const double> blob);

nlohmann::json append_vector(const Vector& v, std::vector<double>& blob);
Vector read_vector(const nlohmann::json& description, std::span<const double> blob);

void write_param_file(const std::filesystem::path& path, const nlohmann::json& header, std::span<const double> blob);

struct ParamFile {
    nlohmann::json header;
    std::vector<double> blob;
};

ParamFile read_param_file(const std::filesystem::path& path);

}

#endif
