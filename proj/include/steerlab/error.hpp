#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace steerlab {

enum class ErrorCode {
    EmptyCorpus,
    SequenceTooLong,
    ShapeError,
    DegenerateSequence,
    TrainingDiverged,
    EmptyDataset,
    DegenerateDirection,
    InvalidHookSet,
    NoViableDirection,
    SpecError,
    ParseError,
    SchemaError,
    EmptyInput,
    InvalidDesign,
    KeyError,
    UndefinedEffect,
    JudgeProtocolError,
    JudgeUnavailable,
    CorpusAnnotationFailed,
    FormatError,
    IoError,
    DependencyError,
    UsageError,
};

constexpr std::string_view to_string(ErrorCode code) noexcept {
    switch (code) {
    case ErrorCode::EmptyCorpus: return "EmptyCorpus";
    case ErrorCode::SequenceTooLong: return "SequenceTooLong";
    case ErrorCode::ShapeError: return "ShapeError";
    case ErrorCode::DegenerateSequence: return "DegenerateSequence";
    case ErrorCode::TrainingDiverged: return "TrainingDiverged";
    case ErrorCode::EmptyDataset: return "EmptyDataset";
    case ErrorCode::DegenerateDirection: return "DegenerateDirection";
    case ErrorCode::InvalidHookSet: return "InvalidHookSet";
    case ErrorCode::NoViableDirection: return "NoViableDirection";
    case ErrorCode::SpecError: return "SpecError";
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::SchemaError: return "SchemaError";
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::InvalidDesign: return "InvalidDesign";
    case ErrorCode::KeyError: return "KeyError";
    case ErrorCode::UndefinedEffect: return "UndefinedEffect";
    case ErrorCode::JudgeProtocolError: return "JudgeProtocolError";
    case ErrorCode::JudgeUnavailable: return "JudgeUnavailable";
    case ErrorCode::CorpusAnnotationFailed: return "CorpusAnnotationFailed";
    case ErrorCode::FormatError: return "FormatError";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::DependencyError: return "DependencyError";
    case ErrorCode::UsageError: return "UsageError";
    }
    return "Unknown";
}

/// Single exception type for the library; callers branch on code().
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

/// ParseError/SchemaError raised while reading line-oriented files carry the 1-based line.
class LineError : public Error {
public:
    LineError(ErrorCode code, std::size_t line, const std::string& message)
        : Error(code, "line " + std::to_string(line) + ": " + message), line_(line) {}

    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
    throw Error(code, message);
}

inline void require(bool cond, ErrorCode code, const std::string& message) {
    if (!cond) {
        throw Error(code, message);
    }
}

} // namespace steerlab
