#pragma once

#include <stdexcept>
#include <string>

namespace egvit {

// Base for everything this library throws on contract violations.
struct Error : std::runtime_error {
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

#define EGVIT_DEFINE_ERROR(Name)                                          \
    struct Name : Error {                                                 \
        explicit Name(const std::string& what = #Name) : Error(what) {}   \
    }

// gaze pipeline
EGVIT_DEFINE_ERROR(EmptyTrace);
EGVIT_DEFINE_ERROR(AllSaccades);
EGVIT_DEFINE_ERROR(NoFixations);
EGVIT_DEFINE_ERROR(ZeroDims);
EGVIT_DEFINE_ERROR(BadK);
EGVIT_DEFINE_ERROR(BadWindow);
EGVIT_DEFINE_ERROR(RoiOutOfBounds);

// model
EGVIT_DEFINE_ERROR(ShapeMismatch);
EGVIT_DEFINE_ERROR(MaskLengthMismatch);
EGVIT_DEFINE_ERROR(ConfigMismatch);
EGVIT_DEFINE_ERROR(NoForwardState);

// training / evaluation
EGVIT_DEFINE_ERROR(MissingHeatmap);
EGVIT_DEFINE_ERROR(EmptyTrainSplit);
EGVIT_DEFINE_ERROR(EmptySplit);

// explain
EGVIT_DEFINE_ERROR(DimMismatch);

// synth
EGVIT_DEFINE_ERROR(InfeasibleSpec);

// I/O
EGVIT_DEFINE_ERROR(IoError);
EGVIT_DEFINE_ERROR(FormatError);

#undef EGVIT_DEFINE_ERROR

}  // namespace egvit
