#include "sublim/arch.hpp"

#include "sublim/nets.hpp"
#include "sublim/qsim.hpp"

namespace sublim {

std::string to_string(Channel c) { return c == Channel::aux ? "aux" : "task"; }

std::string to_string(Arch a) {
    switch (a) {
        case Arch::qnn: return "qnn";
        case Arch::mlp: return "mlp";
        case Arch::cnn: return "cnn";
    }
    return "?";
}

Channel channel_from_string(const std::string& s) {
    if (s == "aux") return Channel::aux;
    if (s == "task") return Channel::task;
    throw ConfigError("unknown channel '" + s + "' (expected aux or task)");
}

Arch arch_from_string(const std::string& s) {
    if (s == "qnn") return Arch::qnn;
    if (s == "mlp") return Arch::mlp;
    if (s == "cnn") return Arch::cnn;
    throw ConfigError("unknown model '" + s + "' (expected qnn, mlp or cnn)");
}

void ModelConfig::validate() const {
    switch (arch) {
        case Arch::qnn:
            if (depth < 1) throw ConfigError("model.depth must be >= 1");
            break;
        case Arch::mlp:
            if (hidden.empty()) throw ConfigError("model.hidden needs at least one layer");
            for (auto h : hidden) {
                if (h == 0) throw ConfigError("model.hidden widths must be positive");
            }
            break;
        case Arch::cnn:
            if (channel != Channel::task) throw ConfigError("the cnn control only exists for the task channel");
            if (filters == 0) throw ConfigError("model.filters must be positive");
            break;
    }
}

std::string ModelConfig::describe() const { return make_model(*this)->describe(); }

std::unique_ptr<Model> make_model(const ModelConfig& cfg) {
    cfg.validate();
    switch (cfg.arch) {
        case Arch::qnn:
            return std::make_unique<qsim::QnnModel>(cfg.channel == Channel::aux
                                                        ? qsim::QnnConfig::auxiliary(cfg.depth)
                                                        : qsim::QnnConfig::task(cfg.depth));
        case Arch::mlp: {
            nets::MlpConfig m;
            m.layer_sizes = {784};
            m.layer_sizes.insert(m.layer_sizes.end(), cfg.hidden.begin(), cfg.hidden.end());
            m.layer_sizes.push_back(cfg.channel == Channel::aux ? 16 : 20);
            return std::make_unique<nets::MlpModel>(m);
        }
        case Arch::cnn:
            return std::make_unique<nets::CnnModel>(nets::CnnConfig{cfg.filters});
    }
    throw ConfigError("unknown architecture");
}

}  // namespace sublim
