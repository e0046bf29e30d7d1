#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace mmkb {

// Input data is malformed or violates a documented invariant.
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// An encoder or LLM backend could not serve a request.
class BackendError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class MalformedRecord : public DataError {
public:
    MalformedRecord(std::size_t line_no, const std::string& what)
        : DataError("malformed record at line " + std::to_string(line_no) + ": " + what),
          line_no_(line_no) {}
    std::size_t line_no() const { return line_no_; }

private:
    std::size_t line_no_;
};

class MissingImage : public DataError {
public:
    explicit MissingImage(const std::string& id, const std::string& detail = {})
        : DataError("missing image for record '" + id + "'" + (detail.empty() ? "" : ": " + detail)),
          id_(id) {}
    const std::string& id() const { return id_; }

private:
    std::string id_;
};

class ShapeMismatch : public DataError {
public:
    using DataError::DataError;
};

class DegenerateGrid : public DataError {
public:
    using DataError::DataError;
};

class BadMagic : public DataError {
public:
    using DataError::DataError;
};

class TruncatedFile : public DataError {
public:
    using DataError::DataError;
};

class ConflictingSense : public DataError {
public:
    using DataError::DataError;
};

class LengthMismatch : public DataError {
public:
    using DataError::DataError;
};

class EmptyInput : public DataError {
public:
    using DataError::DataError;
};

class EmptyIndex : public DataError {
public:
    using DataError::DataError;
};

class EmptyGeneration : public DataError {
public:
    using DataError::DataError;
};

class BackendUnavailable : public BackendError {
public:
    using BackendError::BackendError;
};

// A backend returned tensors that contradict its descriptor.
class ShapeViolation : public BackendError {
public:
    using BackendError::BackendError;
};

class TokenizerFailure : public BackendError {
public:
    using BackendError::BackendError;
};

class LlmUnavailable : public BackendError {
public:
    using BackendError::BackendError;
};

} // namespace mmkb
