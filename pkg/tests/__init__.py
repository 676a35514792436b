# Tests para error-diffusion-ptq
