#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "xphase/model.hpp"
#include "xphase/phantom.hpp"
#include "xphase/trainer.hpp"

namespace xphase {

// Flat key=value configuration with model. / train. / data. prefixes.
// Every key has a default; unknown keys are rejected so typos cannot pass
// silently. The effective map is echoed verbatim into run reports.
class RunConfig {
 public:
  static RunConfig defaults();
  static RunConfig from_file(const std::string& path);

  // Throws std::invalid_argument for keys outside the default set.
  void set(const std::string& key, const std::string& value);
  const std::string& get(const std::string& key) const;

  ModelConfig model() const;
  TrainConfig trainer() const;
  GeneratorConfig generator() const;

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace xphase
