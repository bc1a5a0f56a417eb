# Dataset validation package
