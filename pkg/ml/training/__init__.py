# Optimizer, checkpoints and the two-stage training procedure
