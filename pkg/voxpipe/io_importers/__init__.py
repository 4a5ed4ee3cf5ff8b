# io_importers package
