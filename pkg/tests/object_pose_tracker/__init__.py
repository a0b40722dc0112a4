"""Tests for object_pose_tracker modules."""
