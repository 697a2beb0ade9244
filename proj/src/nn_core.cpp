#include "gimvi/nn_core.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include "gimvi/count_dist.hpp"
#include "gimvi/errors.hpp"

namespace gimvi {

namespace {

constexpr std::array<char, 8> kMagic = {'G', 'I', 'M', 'V', 'I', 'P', 'B', '1'};

Matrix apply_activation(const Matrix& pre, Activation act) {
    switch (act) {
    case Activation::identity:
        return pre;
    case Activation::relu:
        return pre.cwiseMax(0.0);
    case Activation::softplus:
        return pre.unaryExpr([](double v) { return softplus(v); });
    case Activation::sigmoid:
        return pre.unaryExpr([](double v) { return sigmoid(v); });
    case Activation::softmax: {
        Matrix out(pre.rows(), pre.cols());
        for (Eigen::Index r = 0; r < pre.rows(); ++r) {
            const double hi = pre.row(r).maxCoeff();
            out.row(r) = (pre.row(r).array() - hi).exp();
            out.row(r) /= out.row(r).sum();
        }
        return out;
    }
    }
    return pre;
}

// Gradient with respect to the pre-activation, given the gradient with respect to the activation output.
Matrix activation_backward(const Matrix& upstream, const Matrix& pre, const Matrix& out, Activation act) {
    switch (act) {
    case Activation::identity:
        return upstream;
    case Activation::relu:
        return upstream.cwiseProduct((pre.array() > 0).cast<double>().matrix());
    case Activation::softplus:
        return upstream.cwiseProduct(pre.unaryExpr([](double v) { return sigmoid(v); }));
    case Activation::sigmoid:
        return upstream.cwiseProduct((out.array() * (1.0 - out.array())).matrix());
    case Activation::softmax: {
        Matrix res(upstream.rows(), upstream.cols());
        for (Eigen::Index r = 0; r < upstream.rows(); ++r) {
            const double dot = upstream.row(r).dot(out.row(r));
            res.row(r) = out.row(r).array() * (upstream.row(r).array() - dot);
        }
        return res;
    }
    }
    return upstream;
}

void put_u64(std::ostream& out, std::uint64_t v) {
    unsigned char bytes[8];
    for (int i = 0; i < 8; ++i) {
        bytes[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
    }
    out.write(reinterpret_cast<const char*>(bytes), 8);
}

std::uint64_t get_u64(const unsigned char* bytes) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
        v |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
    }
    return v;
}

}

std::string to_string(Activation a) {
    switch (a) {
    case Activation::relu:
        return "relu";
    case Activation::softplus:
        return "softplus";
    case Activation::identity:
        return "identity";
    case Activation::softmax:
        return "softmax";
    case Activation::sigmoid:
        return "sigmoid";
    }
    return "identity";
}

Activation activation_from_string(const std::string& name) {
    for (auto a : {Activation::relu, Activation::softplus, Activation::identity, Activation::softmax, Activation::sigmoid}) {
        if (to_string(a) == name) {
            return a;
        }
    }
    throw DataError("unknown activation tag '" + name + "'");
}

void NetGradient::set_zero() {
    for (auto& w : d_weight) {
        w.setZero();
    }
    for (auto& b : d_bias) {
        b.setZero();
    }
}

DenseNet::DenseNet(std::vector<DenseLayer> layers) : layers_(std::move(layers)) {
    validate();
}

void DenseNet::validate() const {
    require(!layers_.empty(), "DenseNet: at least one layer is required");
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const auto& l = layers_[i];
        require(l.weight.rows() == l.bias.size(), "DenseNet: bias length must match weight rows");
        require(l.weight.rows() > 0 && l.weight.cols() > 0, "DenseNet: empty layer");
        if (i > 0) {
            require(l.weight.cols() == layers_[i - 1].weight.rows(), "DenseNet: adjacent layer widths do not chain");
        }
        if (l.activation == Activation::softmax) {
            require(i + 1 == layers_.size(), "DenseNet: softmax is only allowed as the final activation");
        }
        require(l.weight.allFinite() && l.bias.allFinite(), "DenseNet: non-finite parameters");
    }
}

DenseNet DenseNet::mlp(std::span<const int> widths, Activation hidden, Activation output, Rng& rng) {
    require(widths.size() >= 2, "DenseNet::mlp: need at least input and output widths");
    std::vector<DenseLayer> layers;
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
        const int fan_in = widths[i];
        const int fan_out = widths[i + 1];
        require(fan_in > 0 && fan_out > 0, "DenseNet::mlp: widths must be positive");
        const double a = std::sqrt(6.0 / (fan_in + fan_out));
        std::uniform_real_distribution<double> unif(-a, a);
        DenseLayer layer;
        layer.weight.resize(fan_out, fan_in);
        for (Eigen::Index c = 0; c < layer.weight.cols(); ++c) {
            for (Eigen::Index r = 0; r < layer.weight.rows(); ++r) {
                layer.weight(r, c) = unif(rng);
            }
        }
        layer.bias = Vector::Zero(fan_out);
        layer.activation = (i + 2 == widths.size()) ? output : hidden;
        layers.push_back(std::move(layer));
    }
    return DenseNet(std::move(layers));
}

int DenseNet::input_width() const {
    return layers_.empty() ? 0 : static_cast<int>(layers_.front().weight.cols());
}

int DenseNet::output_width() const {
    return layers_.empty() ? 0 : static_cast<int>(layers_.back().weight.rows());
}

std::size_t DenseNet::num_parameters() const {
    std::size_t n = 0;
    for (const auto& l : layers_) {
        n += l.weight.size() + l.bias.size();
    }
    return n;
}

Matrix DenseNet::forward(const Matrix& input, Tape* tape) const {
    require(!layers_.empty(), "DenseNet::forward: network has no layers");
    require(input.cols() == input_width(), "DenseNet::forward: input width mismatch");
    if (tape) {
        tape->inputs.clear();
        tape->pre_activations.clear();
        tape->outputs.clear();
        tape->owner = this;
        tape->consumed = false;
    }

    Matrix current = input;
    for (const auto& l : layers_) {
        Matrix pre = current * l.weight.transpose();
        pre.rowwise() += l.bias.transpose();
        Matrix out = apply_activation(pre, l.activation);
        if (tape) {
            tape->inputs.push_back(std::move(current));
            tape->pre_activations.push_back(std::move(pre));
            tape->outputs.push_back(out);
        }
        current = std::move(out);
    }
    return current;
}

Matrix DenseNet::backward(Tape& tape, const Matrix& upstream, NetGradient& grad) const {
    require(tape.recorded() && tape.owner == this, "DenseNet::backward: no forward pass recorded for this network");
    require(!tape.consumed, "DenseNet::backward: tape already consumed by a backward pass");
    require(grad.d_weight.size() == layers_.size(), "DenseNet::backward: gradient buffer does not match network");
    require(upstream.rows() == tape.outputs.back().rows() && upstream.cols() == output_width(),
            "DenseNet::backward: upstream gradient shape mismatch");
    tape.consumed = true;

    Matrix g = upstream;
    for (std::size_t idx = layers_.size(); idx-- > 0;) {
        const auto& l = layers_[idx];
        Matrix d_pre = activation_backward(g, tape.pre_activations[idx], tape.outputs[idx], l.activation);
        grad.d_weight[idx].noalias() += d_pre.transpose() * tape.inputs[idx];
        grad.d_bias[idx] += d_pre.colwise().sum().transpose();
        g = d_pre * l.weight;
    }
    return g;
}

NetGradient DenseNet::zero_gradient() const {
    NetGradient g;
    for (const auto& l : layers_) {
        g.d_weight.push_back(Matrix::Zero(l.weight.rows(), l.weight.cols()));
        g.d_bias.push_back(Vector::Zero(l.bias.size()));
    }
    return g;
}

std::vector<ParamView> DenseNet::parameters(NetGradient& grad) {
    require(grad.d_weight.size() == layers_.size(), "DenseNet::parameters: gradient buffer does not match network");
    std::vector<ParamView> out;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        auto& l = layers_[i];
        out.push_back({std::span<double>(l.weight.data(), static_cast<std::size_t>(l.weight.size())),
                       std::span<const double>(grad.d_weight[i].data(), static_cast<std::size_t>(grad.d_weight[i].size()))});
        out.push_back({std::span<double>(l.bias.data(), static_cast<std::size_t>(l.bias.size())),
                       std::span<const double>(grad.d_bias[i].data(), static_cast<std::size_t>(grad.d_bias[i].size()))});
    }
    return out;
}

NoiseSource NoiseSource::replay(std::vector<double> stream) {
    NoiseSource src;
    src.stream_ = std::move(stream);
    return src;
}

double NoiseSource::standard_normal() {
    if (rng_ == nullptr) {
        require(cursor_ < stream_.size(), "NoiseSource: replay stream exhausted");
        return stream_[cursor_++];
    }
    const double v = normal_(*rng_);
    if (recording_) {
        stream_.push_back(v);
    }
    return v;
}

Matrix NoiseSource::standard_normal(Eigen::Index rows, Eigen::Index cols) {
    Matrix out(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
        for (Eigen::Index c = 0; c < cols; ++c) {
            out(r, c) = standard_normal();
        }
    }
    return out;
}

GaussianSample reparam_gaussian(const Matrix& mu, const Matrix& log_var, NoiseSource& noise) {
    require(mu.rows() == log_var.rows() && mu.cols() == log_var.cols(), "reparam_gaussian: mu and log_var shapes differ");
    GaussianSample draw;
    draw.eps = noise.standard_normal(mu.rows(), mu.cols());
    draw.std_dev = (0.5 * log_var.array()).exp().matrix();
    draw.sample = mu + draw.std_dev.cwiseProduct(draw.eps);
    return draw;
}

GaussianSampleGrad reparam_backward(const GaussianSample& draw, const Matrix& upstream) {
    require(upstream.rows() == draw.sample.rows() && upstream.cols() == draw.sample.cols(),
            "reparam_backward: upstream gradient shape mismatch");
    GaussianSampleGrad g;
    g.d_mu = upstream;
    g.d_log_var = 0.5 * upstream.cwiseProduct(draw.std_dev).cwiseProduct(draw.eps);
    return g;
}

GradReverse::GradReverse(double s) : scale(s) {
    require(s >= 0 && std::isfinite(s), "GradReverse: scale must be finite and non-negative");
}

Matrix GradReverse::backward(const Matrix& upstream) const {
    return -scale * upstream;
}

void adam_step(std::span<const ParamView> params, AdamState& state) {
    if (state.first_moment.empty()) {
        for (const auto& p : params) {
            state.first_moment.emplace_back(p.value.size(), 0.0);
            state.second_moment.emplace_back(p.value.size(), 0.0);
        }
    }
    require(state.first_moment.size() == params.size() && state.second_moment.size() == params.size(),
            "adam_step: parameter block count does not match optimizer state");
    for (std::size_t b = 0; b < params.size(); ++b) {
        require(params[b].value.size() == params[b].grad.size(), "adam_step: parameter and gradient sizes differ");
        require(state.first_moment[b].size() == params[b].value.size(), "adam_step: parameter block size changed");
    }

    ++state.step_count;
    const double t = static_cast<double>(state.step_count);
    const double correct1 = 1.0 - std::pow(state.beta1, t);
    const double correct2 = 1.0 - std::pow(state.beta2, t);
    for (std::size_t b = 0; b < params.size(); ++b) {
        auto value = params[b].value;
        auto grad = params[b].grad;
        auto& m = state.first_moment[b];
        auto& v = state.second_moment[b];
        for (std::size_t i = 0; i < value.size(); ++i) {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * grad[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * grad[i] * grad[i];
            const double m_hat = m[i] / correct1;
            const double v_hat = v[i] / correct2;
            value[i] -= state.learning_rate * m_hat / (std::sqrt(v_hat) + state.epsilon);
        }
    }
}

nlohmann::json append_net(const DenseNet& net, std::vector<double>& blob) {
    nlohmann::json desc;
    desc["offset"] = blob.size();
    desc["layers"] = nlohmann::json::array();
    for (const auto& l : net.layers()) {
        desc["layers"].push_back({{"in", l.weight.cols()}, {"out", l.weight.rows()}, {"activation", to_string(l.activation)}});
        for (Eigen::Index r = 0; r < l.weight.rows(); ++r) {
            for (Eigen::Index c = 0; c < l.weight.cols(); ++c) {
                blob.push_back(l.weight(r, c));
            }
        }
        for (Eigen::Index r = 0; r < l.bias.size(); ++r) {
            blob.push_back(l.bias(r));
        }
    }
    return desc;
}

DenseNet read_net(const nlohmann::json& description, std::span<const double> blob) {
    std::size_t offset = description.at("offset").get<std::size_t>();
    std::vector<DenseLayer> layers;
    for (const auto& ld : description.at("layers")) {
        const auto in = ld.at("in").get<Eigen::Index>();
        const auto out = ld.at("out").get<Eigen::Index>();
        if (in <= 0 || out <= 0 || offset + static_cast<std::size_t>(in * out + out) > blob.size()) {
            throw DataError("parameter blob too short for described network layer");
        }
        DenseLayer l;
        l.activation = activation_from_string(ld.at("activation").get<std::string>());
        l.weight.resize(out, in);
        for (Eigen::Index r = 0; r < out; ++r) {
            for (Eigen::Index c = 0; c < in; ++c) {
                l.weight(r, c) = blob[offset++];
            }
        }
        l.bias.resize(out);
        for (Eigen::Index r = 0; r < out; ++r) {
            l.bias(r) = blob[offset++];
        }
        layers.push_back(std::move(l));
    }
    try {
        return DenseNet(std::move(layers));
    } catch (const ContractViolation& e) {
        throw DataError(std::string("invalid network in parameter file: ") + e.what());
    }
}

nlohmann::json append_vector(const Vector& v, std::vector<double>& blob) {
    nlohmann::json desc = {{"offset", blob.size()}, {"size", v.size()}};
    for (Eigen::Index i = 0; i < v.size(); ++i) {
        blob.push_back(v(i));
    }
    return desc;
}

Vector read_vector(const nlohmann::json& description, std::span<const double> blob) {
    const auto offset = description.at("offset").get<std::size_t>();
    const auto size = description.at("size").get<std::size_t>();
    if (offset + size > blob.size()) {
        throw DataError("parameter blob too short for described vector");
    }
    Vector v(static_cast<Eigen::Index>(size));
    for (std::size_t i = 0; i < size; ++i) {
        v(static_cast<Eigen::Index>(i)) = blob[offset + i];
    }
    return v;
}

void write_param_file(const std::filesystem::path& path, const nlohmann::json& header, std::span<const double> blob) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw std::runtime_error("cannot open '" + path.string() + "' for writing");
    }
    const std::string text = header.dump();
    out.write(kMagic.data(), kMagic.size());
    put_u64(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (double d : blob) {
        std::uint64_t bits;
        std::memcpy(&bits, &d, sizeof bits);
        put_u64(out, bits);
    }
    if (!out) {
        throw std::runtime_error("failed writing '" + path.string() + "'");
    }
}

ParamFile read_param_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open parameter file '" + path.string() + "'");
    }
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() < 16 || !std::equal(kMagic.begin(), kMagic.end(), bytes.begin())) {
        throw DataError("'" + path.string() + "' is not a gimvi parameter file");
    }
    const std::uint64_t header_len = get_u64(bytes.data() + 8);
    if (16 + header_len > bytes.size() || (bytes.size() - 16 - header_len) % 8 != 0) {
        throw DataError("'" + path.string() + "' is truncated");
    }
    ParamFile pf;
    try {
        pf.header = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(header_len));
    } catch (const nlohmann::json::exception& e) {
        throw DataError("'" + path.string() + "' has a corrupt header: " + e.what());
    }
    const std::size_t n = (bytes.size() - 16 - header_len) / 8;
    pf.blob.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::uint64_t bits = get_u64(bytes.data() + 16 + header_len + 8 * i);
        std::memcpy(&pf.blob[i], &bits, sizeof bits);
    }
    return pf;
}

}
