# Loss, metrics and evaluation package
