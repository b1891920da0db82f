#pragma once

#include "qdalign/corpus.hpp"
#include "qdalign/csv.hpp"
#include "qdalign/emitters.hpp"
#include "qdalign/error.hpp"
#include "qdalign/fitcore.hpp"
#include "qdalign/image.hpp"
#include "qdalign/imgproc.hpp"
#include "qdalign/markers.hpp"
#include "qdalign/models.hpp"
#include "qdalign/pipeline.hpp"
#include "qdalign/presets.hpp"
#include "qdalign/random.hpp"
#include "qdalign/registration.hpp"
#include "qdalign/special.hpp"
#include "qdalign/stark.hpp"
#include "qdalign/synth.hpp"
#include "qdalign/waveguides.hpp"
