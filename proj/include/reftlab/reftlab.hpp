#pragma once

// Umbrella header: the whole library in dependency order.

#include "reftlab/rng.hpp"
#include "reftlab/vocab.hpp"
#include "reftlab/task.hpp"
#include "reftlab/policy.hpp"
#include "reftlab/sampler.hpp"
#include "reftlab/advantage.hpp"
#include "reftlab/enumerate.hpp"
#include "reftlab/metrics.hpp"
#include "reftlab/train.hpp"
#include "reftlab/config.hpp"
#include "reftlab/experiment.hpp"
