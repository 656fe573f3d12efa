# Package for box and grid mathematics: coordinate conversion, masks, IoU/GIoU
