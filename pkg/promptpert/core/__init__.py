"""Core domain modules: data, conditioning, generator, training, evaluation."""
