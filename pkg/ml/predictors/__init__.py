# Base (level-0) depth predictors
