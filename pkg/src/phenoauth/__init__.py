"""PUF-Phenotype based mutual authentication."""
