#pragma once

#include <stdexcept>
#include <string>

namespace iwgt {

/// Base of every error raised by the library. `category()` is stable and is
/// what the CLI maps onto exit codes.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
    virtual const char* category() const noexcept { return "error"; }
};

#define IWGT_DEFINE_ERROR(Name, tag)                                   \
    class Name : public Error {                                        \
    public:                                                            \
        using Error::Error;                                            \
        const char* category() const noexcept override { return tag; } \
    }

IWGT_DEFINE_ERROR(InvalidArgument, "invalid-argument");
IWGT_DEFINE_ERROR(ShapeError, "shape-error");
IWGT_DEFINE_ERROR(NumericalFailure, "numerical-failure");
IWGT_DEFINE_ERROR(GenerationFailure, "generation-failure");
IWGT_DEFINE_ERROR(FileError, "file-error");
IWGT_DEFINE_ERROR(ResourceLimit, "resource-limit");
IWGT_DEFINE_ERROR(DegenerateLoss, "degenerate-loss");
IWGT_DEFINE_ERROR(UndefinedRatio, "undefined-ratio");
IWGT_DEFINE_ERROR(ConfigError, "config-error");
IWGT_DEFINE_ERROR(DatasetTooSmall, "dataset-too-small");

#undef IWGT_DEFINE_ERROR

/// Checkpoint loading failures are distinguished by kind so callers can tell
/// a stale format from a damaged file.
class CheckpointError : public Error {
public:
    enum class Kind { VersionMismatch, ShapeMismatch, Truncated, Manifest };

    CheckpointError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}

    Kind kind() const noexcept { return kind_; }

    const char* category() const noexcept override {
        switch (kind_) {
        case Kind::VersionMismatch: return "checkpoint-version-mismatch";
        case Kind::ShapeMismatch: return "checkpoint-shape-mismatch";
        case Kind::Truncated: return "checkpoint-truncated";
        case Kind::Manifest: return "checkpoint-manifest";
        }
        return "checkpoint";
    }

private:
    Kind kind_;
};

} // namespace iwgt
