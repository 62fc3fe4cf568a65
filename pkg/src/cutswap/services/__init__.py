"""Service layer modules orchestrating the pipeline stages."""
