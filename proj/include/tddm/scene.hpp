#pragma once

#include "tddm/scene/corpus.hpp"
#include "tddm/scene/geometry.hpp"
#include "tddm/scene/record.hpp"
#include "tddm/scene/world.hpp"
