"""Tests for the pose graph package."""
