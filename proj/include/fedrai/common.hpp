#pragma once

// Shared plumbing: error taxonomy, seed derivation, checksums and a small
// deterministic parallel-for. Everything here is header-light; the pool
// lives in common.cpp.

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace fedrai {

// Error taxonomy. The CLI maps these onto exit codes
// (config 2, missing input 3, numeric 4, anything else 1).
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct LengthError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct MissingInputError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct TrainingError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct GenerationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct PartitionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// splitmix64 finalizer; good enough to decorrelate derived streams.
uint64_t mix64(uint64_t x);

// FNV-1a over bytes, used both for stream derivation and file checksums.
uint64_t fnv1a(std::string_view bytes);

// Independent stream seeds from a master seed plus a labelled path, so that
// scheduling and call order can never change which numbers a consumer sees.
uint64_t derive_seed(uint64_t master, std::string_view tag);
uint64_t derive_seed(uint64_t master, std::string_view tag, uint64_t a);
uint64_t derive_seed(uint64_t master, std::string_view tag, uint64_t a, uint64_t b);

// Worker budget: min(requested or hardware, FEDRAI_THREADS). requested == 0
// means "use the hardware count". Always at least 1.
int effective_threads(int requested = 0);

// Runs fn(i) for i in [0, n). Work items must only write to their own
// per-index slots; reductions belong to the caller, in index order, so the
// result is independent of the worker count.
void parallel_for(size_t n, const std::function<void(size_t)>& fn);

std::string fnv1a_hex(std::string_view bytes);
std::string checksum_file(const std::string& path);  // throws IoError

std::string read_text_file(const std::string& path);
void write_text_file_atomic(const std::string& path, std::string_view content);

}  // namespace fedrai
