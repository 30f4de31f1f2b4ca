"""HTTP service wrapping the core engine; the CLI is a thin client of it."""
