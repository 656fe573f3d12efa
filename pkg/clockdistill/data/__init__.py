# Package for the synthetic shapes dataset and COCO-style annotation ingestion
