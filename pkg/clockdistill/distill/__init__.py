# Package for distillation losses and target-aware query construction
