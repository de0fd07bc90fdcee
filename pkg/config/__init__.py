# swarmforge - settings and experiment descriptions
