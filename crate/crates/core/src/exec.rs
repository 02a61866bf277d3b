//! Data-parallel helpers.
//!
//! With the default `parallel` feature these fan out over rayon; without it
//! they degrade to plain sequential iteration. Results are collected in input
//! order and combined sequentially by callers, so both modes produce
//! bit-identical outputs.

use crate::error::Result;

#[cfg(feature = "parallel")]
pub fn map_slice<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_slice<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}

#[cfg(feature = "parallel")]
pub fn try_map_mut<T, R, F>(items: &mut [T], f: F) -> Result<Vec<R>>
where
    T: Send,
    R: Send,
    F: Fn(&mut T) -> Result<R> + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter_mut().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn try_map_mut<T, R, F>(items: &mut [T], f: F) -> Result<Vec<R>>
where
    F: Fn(&mut T) -> Result<R>,
{
    items.iter_mut().map(f).collect()
}

#[cfg(feature = "parallel")]
pub fn try_map_slice<T, R, F>(items: &[T], f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn try_map_slice<T, R, F>(items: &[T], f: F) -> Result<Vec<R>>
where
    F: Fn(&T) -> Result<R>,
{
    items.iter().map(f).collect()
}
