use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape4, Tensor4};

/// Stack `a` and `b` along the channel axis, `a` first.
pub fn concat_channels<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.n != sb.n || sa.h != sb.h || sa.w != sb.w {
        return Err(Error::shape(format!("cannot concatenate {sa} with {sb}")));
    }
    let out = Shape4::new(sa.n, sa.c + sb.c, sa.h, sa.w);
    let mut data = Vec::with_capacity(out.len());
    for n in 0..sa.n {
        data.extend_from_slice(a.item(n));
        data.extend_from_slice(b.item(n));
    }
    Tensor4::from_vec(out, data)
}

/// Inverse of [`concat_channels`]: split at channel `first_channels`.
pub fn split_channels<T: Scalar>(x: &Tensor4<T>, first_channels: usize) -> Result<(Tensor4<T>, Tensor4<T>)> {
    let s = x.shape();
    if first_channels > s.c {
        return Err(Error::shape(format!("cannot split {first_channels} channels off {s}")));
    }
    let split = first_channels * s.plane();
    let mut a = Vec::with_capacity(s.n * split);
    let mut b = Vec::with_capacity(s.len() - s.n * split);
    for n in 0..s.n {
        let item = x.item(n);
        a.extend_from_slice(&item[..split]);
        b.extend_from_slice(&item[split..]);
    }
    Ok((
        Tensor4::from_vec(Shape4 { c: first_channels, ..s }, a)?,
        Tensor4::from_vec(Shape4 { c: s.c - first_channels, ..s }, b)?,
    ))
}
