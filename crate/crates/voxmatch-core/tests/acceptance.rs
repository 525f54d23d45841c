// acceptance suite: filled in at the end of the build
