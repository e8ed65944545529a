#pragma once

#include "idportrait/attribute_mixer.hpp"
#include "idportrait/diffusion.hpp"
#include "idportrait/encoders.hpp"
#include "idportrait/ffrnet.hpp"
#include "idportrait/io/face_params_file.hpp"
#include "idportrait/io/latent_file.hpp"
#include "idportrait/io/png_image.hpp"
#include "idportrait/landmark3d.hpp"
#include "idportrait/pipeline/checkpoint.hpp"
#include "idportrait/pipeline/config.hpp"
#include "idportrait/pipeline/dataset.hpp"
#include "idportrait/pipeline/inference.hpp"
#include "idportrait/pipeline/model.hpp"
#include "idportrait/pipeline/trainer.hpp"
