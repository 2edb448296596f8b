VERSION = "0.1.0"
PROJECT_ID = "latent-depth-diffusion"
