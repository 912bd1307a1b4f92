# Numerical core, training loop and experiment orchestration
