#pragma once

#include "vrec/core.hpp"
#include "vrec/nnet.hpp"
#include "vrec/model_io.hpp"
#include "vrec/distributions.hpp"
#include "vrec/snnl.hpp"
#include "vrec/versioning.hpp"
#include "vrec/filter.hpp"
#include "vrec/parallel.hpp"
#include "vrec/attacks.hpp"
#include "vrec/theory.hpp"
#include "vrec/experiment.hpp"
#include "vrec/config.hpp"
#include "vrec/gateway.hpp"
