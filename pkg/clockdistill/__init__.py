# Location-and-context-aware knowledge distillation for DETR-style detectors
