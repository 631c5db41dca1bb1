# Make utils a package for proper module imports.
