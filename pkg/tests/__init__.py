"""Tests for the srprune package."""
