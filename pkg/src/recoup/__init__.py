"""Regenerative coupling toolkit for nonuniformly expanding interval maps."""
