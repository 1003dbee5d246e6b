#pragma once

#include "depass/archive.hpp"
#include "depass/attribution.hpp"
#include "depass/config.hpp"
#include "depass/dataset.hpp"
#include "depass/decompose.hpp"
#include "depass/errors.hpp"
#include "depass/eval.hpp"
#include "depass/forward.hpp"
#include "depass/io_util.hpp"
#include "depass/model.hpp"
#include "depass/probe.hpp"
#include "depass/projection.hpp"
#include "depass/rng.hpp"
#include "depass/tensor.hpp"
#include "depass/vocab.hpp"
