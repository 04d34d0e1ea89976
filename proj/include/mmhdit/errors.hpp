#pragma once

#include <stdexcept>
#include <string>

namespace mmh {

// Every library error derives from Error so callers can catch the family.
// The CLI maps categories to exit codes (see exit_code_for).
class Error : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
   public:
    using Error::Error;
};

class ConfigError : public Error {
   public:
    using Error::Error;
};

class ContractError : public Error {
   public:
    using Error::Error;
};

class DomainError : public Error {
   public:
    using Error::Error;
};

class ValidationError : public Error {
   public:
    using Error::Error;
};

class IntegrityError : public Error {
   public:
    using Error::Error;
};

class FileError : public Error {
   public:
    using Error::Error;
};

}  // namespace mmh
