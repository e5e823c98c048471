#pragma once

#include "pl2map/diffcore.hpp"
#include "pl2map/geometry.hpp"
#include "pl2map/scene.hpp"
#include "pl2map/model.hpp"
#include "pl2map/losses.hpp"
#include "pl2map/training.hpp"
#include "pl2map/pose.hpp"
#include "pl2map/dataio.hpp"
