# Package for the minimal DETR-style detector: encoder memory, grouped decoder, set loss
