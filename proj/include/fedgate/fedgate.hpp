#pragma once

#include "fedgate/autodiff.hpp"
#include "fedgate/config.hpp"
#include "fedgate/errors.hpp"
#include "fedgate/fed.hpp"
#include "fedgate/ingest.hpp"
#include "fedgate/metrics.hpp"
#include "fedgate/model.hpp"
#include "fedgate/net.hpp"
#include "fedgate/optim.hpp"
#include "fedgate/protocol.hpp"
#include "fedgate/rng.hpp"
#include "fedgate/tensor.hpp"
