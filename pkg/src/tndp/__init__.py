"""Transit network design toolkit."""
