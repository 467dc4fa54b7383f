#pragma once

#include <json.hpp>

#include "cdpm/checkpoint.hpp"
#include "cdpm/denoiser.hpp"
#include "cdpm/phantom.hpp"
#include "cdpm/schedule.hpp"
#include "cdpm/slice_sampler.hpp"

namespace cdpm {

using Json = nlohmann::json;

/// Raised for malformed or semantically invalid configuration.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Readers fill defaults for missing keys and reject unknown keys.
Json to_json(const ScheduleParams& p);
ScheduleParams schedule_from_json(const Json& j);
Json to_json(const SamplerPolicy& p);
SamplerPolicy policy_from_json(const Json& j);
Json to_json(const DenoiserConfig& c);
DenoiserConfig denoiser_from_json(const Json& j);
Json to_json(const PhantomSpec& s);
PhantomSpec phantom_from_json(const Json& j);
Json to_json(const ModelMeta& m);
ModelMeta model_meta_from_json(const Json& j);

/// Throws ConfigError naming any key of `j` not listed in `allowed`.
void reject_unknown_keys(const Json& j, std::initializer_list<const char*> allowed,
                         const std::string& where);

Json parse_json_file(const std::filesystem::path& path);
/// Sorted keys, 2-space indent, trailing newline.
std::string canonical_dump(const Json& j);

}  // namespace cdpm
