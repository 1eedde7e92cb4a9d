#pragma once

#include <stdexcept>
#include <string>

namespace genimg {

struct Error : std::runtime_error {
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

#define GENIMG_DEFINE_ERROR(NAME)                                        \
    struct NAME : Error {                                                 \
        explicit NAME(const std::string& what) : Error(#NAME ": " + what) {} \
    }

GENIMG_DEFINE_ERROR(NonFiniteValue);
GENIMG_DEFINE_ERROR(RankError);
GENIMG_DEFINE_ERROR(ShapeMismatch);
GENIMG_DEFINE_ERROR(RangeError);
GENIMG_DEFINE_ERROR(TimestepOutOfRange);
GENIMG_DEFINE_ERROR(UnknownPredictionType);
GENIMG_DEFINE_ERROR(BufferUnderflow);
GENIMG_DEFINE_ERROR(ContextDimMismatch);
GENIMG_DEFINE_ERROR(DivisibilityError);
GENIMG_DEFINE_ERROR(DimMismatch);
GENIMG_DEFINE_ERROR(NotOneHot);
GENIMG_DEFINE_ERROR(InputTooSmall);
GENIMG_DEFINE_ERROR(SequenceTooLong);
GENIMG_DEFINE_ERROR(TokenOutOfVocab);
GENIMG_DEFINE_ERROR(UnknownCriterion);
GENIMG_DEFINE_ERROR(ExtractorMissing);
GENIMG_DEFINE_ERROR(ModeMismatch);
GENIMG_DEFINE_ERROR(DegenerateFeatures);
GENIMG_DEFINE_ERROR(NumericalFailure);
GENIMG_DEFINE_ERROR(NotEnoughSamples);
GENIMG_DEFINE_ERROR(EmptyInput);
GENIMG_DEFINE_ERROR(EmbedderMissing);
GENIMG_DEFINE_ERROR(EmptyBatch);
GENIMG_DEFINE_ERROR(TilingMismatch);
GENIMG_DEFINE_ERROR(ConfigError);
GENIMG_DEFINE_ERROR(IncompatibleCheckpoint);
GENIMG_DEFINE_ERROR(IoError);

#undef GENIMG_DEFINE_ERROR

}  // namespace genimg
