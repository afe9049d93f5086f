#pragma once

#include "sq/core.hpp"
#include "sq/nn.hpp"
#include "sq/encoders.hpp"
#include "sq/objectives.hpp"
#include "sq/captioner.hpp"
#include "sq/sketchgen.hpp"
#include "sq/image_io.hpp"
#include "sq/data.hpp"
#include "sq/model.hpp"
#include "sq/optim.hpp"
#include "sq/retrieval.hpp"
#include "sq/trainer.hpp"
