# Package for training, distillation, ablations, evaluation and attention export
