#pragma once

#include <stdexcept>
#include <string>

namespace rsvqa {

/// Base of every error this library raises on purpose.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

#define RSVQA_DEFINE_ERROR(Name)                                  \
  class Name : public Error {                                     \
   public:                                                        \
    explicit Name(const std::string& msg) : Error(#Name ": " + msg) {} \
  }

// tensor
RSVQA_DEFINE_ERROR(ShapeMismatch);
RSVQA_DEFINE_ERROR(NumericalError);
RSVQA_DEFINE_ERROR(NotScalar);
RSVQA_DEFINE_ERROR(OutOfVocab);
RSVQA_DEFINE_ERROR(EmptyLoss);

// tokenizer / corpus
RSVQA_DEFINE_ERROR(EmptyCorpus);
RSVQA_DEFINE_ERROR(BadConfig);
RSVQA_DEFINE_ERROR(IoError);
RSVQA_DEFINE_ERROR(SchemaError);
RSVQA_DEFINE_ERROR(FormatError);

// model / training
RSVQA_DEFINE_ERROR(SequenceTooLong);
RSVQA_DEFINE_ERROR(EmptyBatch);
RSVQA_DEFINE_ERROR(BothZero);
RSVQA_DEFINE_ERROR(VersionMismatch);
RSVQA_DEFINE_ERROR(CorruptManifest);

// decoding / eval
RSVQA_DEFINE_ERROR(BadBeamWidth);
RSVQA_DEFINE_ERROR(SearchSpaceTooLarge);
RSVQA_DEFINE_ERROR(EmptyChoices);
RSVQA_DEFINE_ERROR(LengthMismatch);
RSVQA_DEFINE_ERROR(EmptySet);

#undef RSVQA_DEFINE_ERROR

}  // namespace rsvqa
