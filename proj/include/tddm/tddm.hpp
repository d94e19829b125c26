#pragma once

#include "tddm/error.hpp"
#include "tddm/guidance.hpp"
#include "tddm/harness/ablation.hpp"
#include "tddm/harness/closed_loop.hpp"
#include "tddm/harness/config.hpp"
#include "tddm/harness/metrics.hpp"
#include "tddm/harness/pipeline.hpp"
#include "tddm/model.hpp"
#include "tddm/scene.hpp"
#include "tddm/schedule.hpp"
#include "tddm/training.hpp"
#include "tddm/vocabulary.hpp"
