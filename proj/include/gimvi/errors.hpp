#ifndef GIMVI_ERRORS_HPP
#define GIMVI_ERRORS_HPP

#include <cstddef>
#include <stdexcept>
#include <string>

/**
 * @file errors.hpp
 * @brief Exception types shared by every gimvi module.
 */

namespace gimvi {

/** Distribution parameters or arguments outside their support. */
class DomainError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

/** A caller broke a precondition (shape mismatch, empty input, missing forward pass). */
class ContractViolation : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/** Input data is inconsistent with what an operation needs (negative counts, gene mismatch). */
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/** Malformed input file; carries the 1-based line number of the offending line. */
class ParseError : public DataError {
public:
    ParseError(const std::string& path, std::size_t line, const std::string& what)
        : DataError(path + ":" + std::to_string(line) + ": " + what), line_(line) {}

    std::size_t line() const { return line_; }

private:
    std::size_t line_;
};

/** Training produced a non-finite loss. */
class TrainingDiverged : public std::runtime_error {
public:
    explicit TrainingDiverged(int epoch)
        : std::runtime_error("training diverged: non-finite loss at epoch " + std::to_string(epoch)), epoch_(epoch) {}

    int epoch() const { return epoch_; }

private:
    int epoch_;
};

inline void require(bool ok, const char* what) {
    if (!ok) {
        throw ContractViolation(what);
    }
}

}

#endif
